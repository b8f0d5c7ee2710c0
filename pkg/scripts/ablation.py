"""Sweep K' (with d* = K') over several seeds on the 8-class toy generator.

Writes one ablation.csv per seed plus a combined summary.csv, and reports in how
many seeds the linear accuracy is non-decreasing in K'.
"""

import argparse
import csv
from pathlib import Path

from distmatch import config
from distmatch.pipeline import run_ablation

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "ablation8.json"))
    ap.add_argument("--k-prime", type=int, nargs="+", default=[2, 4, 8])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    base = config.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, monotone = [], 0
    for seed in args.seeds:
        sweep = run_ablation(base.with_overrides(out=str(out / f"seed{seed}"), seed=seed), args.k_prime)
        acc = [r["linear"] for r in sweep]
        ok = all(r["status"] == "ok" for r in sweep) and all(a <= b for a, b in zip(acc, acc[1:]))
        monotone += ok
        rows += [{"seed": seed, **r} for r in sweep]
        print(f"seed {seed}: " + "  ".join(f"K'={r['k_prime']}: {r['linear']}" for r in sweep))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "k_prime", "linear", "knn", "status"])
        w.writeheader()
        w.writerows(rows)
    print(f"non-decreasing in {monotone} of {len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
