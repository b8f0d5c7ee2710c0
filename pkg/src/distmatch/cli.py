"""Command line entry point: ``python -m distmatch <subcommand> ...``.

Exit codes: 0 success, 2 invalid configuration or mismatched checkpoint,
3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .augment import estimate_sigma_delta
from .config import ConfigError, RunConfig
from .data import DataError
from .ot import OTError, SinkhornError, mallows_exact, read_measure_csv, sinkhorn, write_plan_csv
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    build_augment,
    build_data,
    build_reference_spec,
    diag_only,
    run_ablation,
    run_experiment,
)
from .reference import ReferenceError, sample_reference, write_sample_csv
from .rng import substream


def _load(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(out=args.out, seed=args.seed)
    config_mod.validate(cfg)
    return cfg


def _fail(msg: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    res = run_experiment(_load(args))
    if res.exit_code != EXIT_OK:
        return _fail(res.message, res.exit_code)
    print(f"{res.out}: linear={res.linear:.4f} knn={res.knn:.4f} max_offdiag={res.report.max_offdiag_abs:.4f}")
    return EXIT_OK


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.dmck"


def cmd_eval(args) -> int:
    cfg = _load(args)
    res = diag_only(cfg, _checkpoint_path(args, cfg), with_accuracy=True)
    if res.exit_code != EXIT_OK:
        return _fail(res.message, res.exit_code)
    print(f"linear={res.linear:.4f} knn={res.knn:.4f}")
    return EXIT_OK


def cmd_diag(args) -> int:
    cfg = _load(args)
    res = diag_only(cfg, _checkpoint_path(args, cfg))
    if res.exit_code != EXIT_OK:
        return _fail(res.message, res.exit_code)
    print(res.out / "diagnostics.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    rows = run_ablation(cfg, args.k_prime)
    for r in rows:
        print(r["k_prime"], r["linear"], r["knn"], r["status"])
    return EXIT_OK


def cmd_ot(args) -> int:
    try:
        mu, nu = read_measure_csv(args.a), read_measure_csv(args.b)
        if args.method == "sinkhorn":
            dist, coupling = sinkhorn(mu, nu, args.cost, reg=args.reg)
        else:
            dist, coupling = mallows_exact(mu, nu, args.cost)
    except (OTError, SinkhornError, ValueError, OSError) as exc:
        return _fail(str(exc))
    print(repr(dist))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_plan_csv(Path(args.out) / "plan.csv", coupling.plan)
    return EXIT_OK


def cmd_reference_sample(args) -> int:
    cfg = _load(args)
    try:
        spec = build_reference_spec(cfg)
    except ReferenceError as exc:
        return _fail(f"reference: {exc}")
    sample = sample_reference(spec, args.n, substream(cfg.seed, "reference/cli"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sample_csv(out / "reference_sample.csv", sample)
    print(out / "reference_sample.csv")
    return EXIT_OK


def cmd_sigma_delta(args) -> int:
    cfg = _load(args)
    try:
        data = build_data(cfg)
    except DataError as exc:
        return _fail(f"data: {exc}")
    split = data.labeled if args.split == "labeled" else data.source
    aug = build_augment(cfg, split.dim)
    report = estimate_sigma_delta(aug, split.points, split.labels, cfg.eval.sigma_grid, disjoint_classes=cfg.data.spread == 0)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "sigma_delta.csv")
    print(out / "sigma_delta.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    common.add_argument("--out", help="output directory, overrides the config's 'out'")
    common.add_argument("--seed", type=int, help="global seed, overrides the config's 'seed'")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="distmatch", description="Distribution-matching representation learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train, probe and write all run artifacts").set_defaults(fn=cmd_train)
    for name, fn, text in (
        ("eval", cmd_eval, "probe accuracies and diagnostics for a checkpoint"),
        ("diag", cmd_diag, "diagnostics only for a checkpoint"),
    ):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--checkpoint", help="defaults to <out>/checkpoint.dmck")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("ablate", parents=[common], help="sweep K' with d* = K'")
    sp.add_argument("--k-prime", type=int, nargs="*", default=[], help="values of K' to run")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("ot", parents=[common], help="transport distance between two CSV point sets")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--cost", choices=["l1", "l2"], default="l2")
    sp.add_argument("--method", choices=["exact", "sinkhorn"], default="exact")
    sp.add_argument("--reg", type=float, default=1e-2)
    sp.set_defaults(fn=cmd_ot)

    sp = sub.add_parser("reference-sample", parents=[common], help="draw from the reference distribution")
    sp.add_argument("--n", type=int, default=1000)
    sp.set_defaults(fn=cmd_reference_sample)

    sp = sub.add_parser("sigma-delta", parents=[common], help="greedy (sigma, delta) table per class")
    sp.add_argument("--split", choices=["labeled", "source"], default="labeled")
    sp.set_defaults(fn=cmd_sigma_delta)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(all="ignore")
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(f"invalid config: {exc}")


if __name__ == "__main__":
    sys.exit(main())
