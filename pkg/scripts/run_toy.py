"""Train the 4-class toy mixture for a few seeds and print one summary line per run.

    python3 scripts/run_toy.py --seeds 0 1 2 --mode dual_gp
"""

import argparse
from dataclasses import replace
from pathlib import Path

from distmatch import config
from distmatch.pipeline import run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--mode", choices=["dual_gp", "primal_exact", "primal_sinkhorn"], default=None)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    base = config.load(args.config)
    if args.mode:
        base = replace(base, trainer=replace(base.trainer, wasserstein_mode=args.mode))
    for seed in args.seeds:
        cfg = base.with_overrides(out=f"{args.out}/seed{seed}", seed=seed)
        res = run_experiment(cfg)
        if res.exit_code:
            print(f"seed {seed}: exit {res.exit_code} {res.message}")
            continue
        r = res.report
        print(f"seed {seed}: linear={res.linear:.4f} knn={res.knn:.4f} "
              f"max_offdiag={r.max_offdiag_abs:.4f} err_estimate={r.err_estimate:.4f}")


if __name__ == "__main__":
    main()
