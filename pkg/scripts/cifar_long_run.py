"""Optional long run on CIFAR-10 binary batches with an MLP backbone (no accuracy gate).

Download and unpack the binary version of CIFAR-10 yourself, then

    python3 scripts/cifar_long_run.py --data-dir /path/to/cifar-10-batches-bin --epochs 50

Expect hours on a CPU. Artifacts land in --out exactly as for ``distmatch train``.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from distmatch import config
from distmatch.pipeline import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--config", default=str(ROOT / "configs" / "cifar10.json"))
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--limit", type=int, help="training images to load (all 50000 when 0)")
    ap.add_argument("--out", default="runs/cifar10")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = config.load(args.config)
    root = Path(args.data_dir)
    data = replace(
        cfg.data,
        cifar_train=tuple(str(root / f"data_batch_{i}.bin") for i in range(1, 6)),
        cifar_test=(str(root / "test_batch.bin"),),
    )
    if args.limit is not None:
        data = replace(data, cifar_limit=args.limit or None)
    cfg = replace(cfg, data=data)
    if args.epochs is not None:
        cfg = replace(cfg, trainer=replace(cfg.trainer, epochs=args.epochs))
    cfg = cfg.with_overrides(out=args.out, seed=args.seed)
    config.validate(cfg)

    res = run_experiment(cfg)
    if res.exit_code:
        raise SystemExit(f"exit {res.exit_code}: {res.message}")
    print(f"linear={res.linear:.4f} knn={res.knn:.4f} max_offdiag={res.report.max_offdiag_abs:.4f}")


if __name__ == "__main__":
    main()
