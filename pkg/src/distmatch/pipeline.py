"""End-to-end runs: build data, train, probe, diagnose, and persist artifacts.

Artifacts written into the run directory:
``config.resolved.json``, ``metrics.csv``, ``checkpoint.dmck``,
``diagnostics.json`` and ``accuracy.csv`` (plus ``gram_trace.csv`` when
``eval.trace_gram`` is on and ``checkpoint_epoch{e}.dmck`` at the configured cadence).
Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .augment import AugmentationSet, AugmentConfig, build_augmentations, estimate_sigma_delta
from .config import ConfigError, RunConfig
from .data import DataError, LabeledDataset, MixtureSpec, estimate_shift, generate, load_cifar10, shifted_spec
from .evaluation import (
    DiagnosticsReport,
    EvalError,
    class_centroids,
    err_rate,
    fit_centroid_probe,
    fit_knn,
    fit_trained_probe,
    gram_from_centroids,
    labeled_views,
    psi_threshold,
    u_t_estimate,
    write_accuracy_csv,
)
from .nn import EncoderStack, NetConfig, NetworkShapeError, encode_array, lipschitz_probe
from .reference import ReferenceSpec, build_reference
from .rng import substream
from .trainer import DivergenceError, fit, write_metrics_csv

log = logging.getLogger("distmatch")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class DataBundle:
    source: LabeledDataset
    labeled: LabeledDataset  # small labeled target split used to fit probes
    test: LabeledDataset  # held-out target split
    name: str
    shift: dict | None = None


@dataclass
class RunResult:
    exit_code: int
    out: Path
    linear: float | None = None
    knn: float | None = None
    report: DiagnosticsReport | None = None
    message: str = ""


# --- assembly ------------------------------------------------------------------------------------

def _per_class_split(pool: LabeledDataset, per_class: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    take = []
    for k in range(1, K + 1):
        idx = np.flatnonzero(pool.labels == k)[:per_class]
        if len(idx) < per_class:
            raise DataError(f"class {k}: only {len(idx)} target points, need {per_class}")
        take.append(idx)
    chosen = np.sort(np.concatenate(take))
    rest = np.setdiff1d(np.arange(len(pool)), chosen)
    return chosen, rest


def _split_seed(seed: int, split: str) -> int:
    # each target split gets its own named generator seed
    return int(substream(seed, f"data/target/{split}").integers(2**31))


def build_data(cfg: RunConfig) -> DataBundle:
    d = cfg.data
    if d.kind == "cifar10":
        try:
            source = load_cifar10(d.cifar_train, d.cifar_limit, "source")
            pool = load_cifar10(d.cifar_test, None, "target")
        except FileNotFoundError as exc:
            raise ConfigError("data.cifar_train" if exc.filename in d.cifar_train else "data.cifar_test", str(exc))
        chosen, rest = _per_class_split(pool, d.target_per_class, 10)
        return DataBundle(source, pool.subset(chosen), pool.subset(rest[: d.target_test]), "cifar10")

    spec = MixtureSpec(d.d, d.K, d.n, tuple(d.class_means[: d.K]), d.spread, d.class_probs, cfg.seed, "source")
    source = generate(spec)
    tspec = shifted_spec(spec, d.target_mean_shift, d.target_prob_shift, seed=cfg.seed)
    need = d.target_per_class * d.K
    pool_n = max(4 * need, 64)
    while True:
        # grow the pool until every class can supply its labeled quota
        pool = generate(replace(tspec, n=pool_n, seed=_split_seed(cfg.seed, "labeled")))
        counts = np.bincount(pool.labels, minlength=d.K + 1)[1:]
        if counts.min() >= d.target_per_class or pool_n > 1_000_000:
            break
        pool_n *= 2
    chosen, _ = _per_class_split(pool, d.target_per_class, d.K)
    test = generate(replace(tspec, n=d.target_test, seed=_split_seed(cfg.seed, "test")))
    shift = estimate_shift(source, test, seed=cfg.seed) if all(np.bincount(test.labels, minlength=d.K + 1)[1:] > 0) else None
    return DataBundle(
        source,
        pool.subset(chosen),
        test,
        "mixture",
        None if shift is None else {"eps1": shift.eps1, "eps2": shift.eps2},
    )


def build_augment(cfg: RunConfig, dim: int) -> AugmentationSet:
    a = cfg.augment
    return build_augmentations(
        AugmentConfig(
            m=a.m,
            kinds=a.kinds,
            noise_std=a.noise_std,
            scale_range=a.scale_range,
            mask_prob=a.mask_prob,
            crop_area=a.crop_area,
            aspect=a.aspect,
            flip=a.flip,
            image_shape=CIFAR_SHAPE if cfg.data.kind == "cifar10" else None,
            seed=cfg.seed,
        ),
        dim,
    )


def build_reference_spec(cfg: RunConfig) -> ReferenceSpec:
    r = cfg.reference
    return build_reference(cfg.network.d_star, r.k_prime, r.radius, r.epsilon, r.alphas, seed=cfg.seed)


def net_config(cfg: RunConfig, input_dim: int) -> NetConfig:
    n = cfg.network
    return NetConfig(
        input_dim=input_dim,
        d_star=n.d_star,
        encoder_hidden=n.encoder_hidden,
        head_hidden=n.head_hidden,
        critic_hidden=n.critic_hidden,
        radius=cfg.reference.radius,
    )


# --- evaluation ------------------------------------------------------------------------------------

def evaluate(
    stack: EncoderStack, cfg: RunConfig, data: DataBundle, aug: AugmentationSet
) -> tuple[DiagnosticsReport, float, float]:
    """Probe accuracies on the held-out target split and the separation diagnostics."""
    e, R = cfg.eval, cfg.reference.radius
    lab, test = data.labeled, data.test
    K = lab.n_classes
    x1, x2, y = labeled_views(lab, aug, cfg.seed, "eval/views")
    centroid = fit_centroid_probe(stack, x1, x2, y, K)
    gram, off = gram_from_centroids(centroid.W)
    if e.probe == "trained":
        linear_model = fit_trained_probe(stack, lab, epochs=e.probe_epochs, seed=cfg.seed)
    else:
        linear_model = centroid
    linear = 1.0 - err_rate(linear_model, stack, test)
    knn = 1.0 - err_rate(fit_knn(stack, lab, e.knn_k), stack, test)
    err_estimate = err_rate(centroid, stack, test)

    u_grid = u_t_estimate(stack, test.points, aug, e.eps_grid)
    u_psi = u_t_estimate(stack, test.points, aug, [e.psi_eps])[0]
    sd = estimate_sigma_delta(aug, lab.points, lab.labels, [e.sigma])
    delta = max(r["delta"] for r in sd.rows)
    lip = lipschitz_probe(stack, test.points[:256], substream(cfg.seed, "eval/lipschitz"))
    freqs = np.bincount(test.labels, minlength=K + 1)[1:] / len(test)
    # held-out centroids stand in for the unobservable population means
    t1, t2, ty = labeled_views(test, aug, cfg.seed, "eval/heldout")
    present = np.unique(ty)
    extras = {
        "lipschitz": lip,
        "delta": delta,
        "sigma": e.sigma,
        "psi_eps": e.psi_eps,
        "u_at_psi_eps": u_psi,
        "linear_accuracy": linear,
        "knn_accuracy": knn,
        "probe": e.probe,
    }
    if data.shift is not None:
        extras.update(data.shift)
    gamma = psi = sep = None
    if len(present) == K:
        z = np.concatenate([encode_array(stack, t1), encode_array(stack, t2)])
        held = class_centroids(z, np.concatenate([ty, ty]), K)
        max_err = float(np.linalg.norm(centroid.W - held, axis=1).max())
        min_normsq = float((centroid.W**2).sum(axis=1).min())
        extras.update({"min_p": float(freqs.min()), "max_centroid_err": max_err, "min_centroid_normsq": min_normsq})
        try:
            res = psi_threshold(e.sigma, delta, e.psi_eps, R, lip, u_psi, float(freqs.min()), min_normsq, max_err)
            gamma, psi = res.gamma_min, res.psi
            sep = bool(off < R * R * psi)
        except EvalError as exc:
            extras["psi_note"] = str(exc)
    else:
        extras["psi_note"] = "a class is missing from the held-out split"
    report = DiagnosticsReport(
        gram=gram.tolist(),
        max_offdiag_abs=off,
        u_t={f"{eps!r}": v for eps, v in zip(e.eps_grid, u_grid)},
        gamma_min=gamma,
        psi=psi,
        separation_condition=sep,
        err_estimate=err_estimate,
        extras=extras,
    )
    return report, linear, knn


def max_offdiag(stack: EncoderStack, cfg: RunConfig, data: DataBundle, aug: AugmentationSet) -> float:
    x1, x2, y = labeled_views(data.labeled, aug, cfg.seed, "eval/views")
    return gram_from_centroids(fit_centroid_probe(stack, x1, x2, y, data.labeled.n_classes).W)[1]


# --- runs -------------------------------------------------------------------------------------------

def run_experiment(cfg: RunConfig) -> RunResult:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfg.dumps())
    try:
        data = build_data(cfg)
    except DataError as exc:
        return RunResult(EXIT_CONFIG, out, message=f"data: {exc}")
    except ConfigError as exc:
        return RunResult(EXIT_CONFIG, out, message=str(exc))
    aug = build_augment(cfg, data.source.dim)
    ref = build_reference_spec(cfg)
    stack = EncoderStack.init(net_config(cfg, data.source.dim), cfg.seed)
    trace: list[tuple[int, float]] = []
    every = cfg.trainer.checkpoint_every

    def on_epoch(epoch: int, s: EncoderStack) -> None:
        if cfg.eval.trace_gram:
            trace.append((epoch, max_offdiag(s, cfg, data, aug)))
        if every and epoch % every == 0:
            checkpoint.save(out / f"checkpoint_epoch{epoch}.dmck", s.to_checkpoint())

    try:
        result = fit(stack, data.source, aug, ref, cfg.train_config(), on_epoch)
    except DivergenceError as exc:
        return RunResult(EXIT_DIVERGED, out, message=str(exc))
    write_metrics_csv(out / "metrics.csv", result.records)
    checkpoint.save(out / "checkpoint.dmck", result.stack.to_checkpoint())
    if cfg.eval.trace_gram:
        with open(out / "gram_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "max_offdiag_abs"])
            w.writerows((e, repr(v)) for e, v in trace)
    report, linear, knn = evaluate(result.stack, cfg, data, aug)
    report.write(out / "diagnostics.json")
    write_accuracy_csv(out / "accuracy.csv", [{"method": "DM", "dataset": data.name, "linear": linear, "knn": knn}])
    log.info("run finished: linear %.4f knn %.4f max offdiag %.4f", linear, knn, report.max_offdiag_abs)
    return RunResult(EXIT_OK, out, linear, knn, report)


def load_stack(cfg: RunConfig, ckpt: str | Path, input_dim: int) -> EncoderStack:
    return EncoderStack.from_checkpoint(checkpoint.load(ckpt), net_config(cfg, input_dim))


def diag_only(cfg: RunConfig, ckpt: str | Path, with_accuracy: bool = False) -> RunResult:
    """Recompute diagnostics (and optionally accuracies) for a saved checkpoint."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        data = build_data(cfg)
        stack = load_stack(cfg, ckpt, data.source.dim)
    except (NetworkShapeError, checkpoint.CheckpointError, DataError, ConfigError) as exc:
        return RunResult(EXIT_CONFIG, out, message=f"checkpoint: {exc}")
    aug = build_augment(cfg, data.source.dim)
    report, linear, knn = evaluate(stack, cfg, data, aug)
    report.write(out / "diagnostics.json")
    if with_accuracy:
        write_accuracy_csv(out / "accuracy.csv", [{"method": "DM", "dataset": data.name, "linear": linear, "knn": knn}])
    return RunResult(EXIT_OK, out, linear, knn, report)


ABLATION_COLUMNS = ["k_prime", "linear", "knn", "status"]


def run_ablation(cfg: RunConfig, k_primes) -> list[dict]:
    """One run per K' with d* = K'; failures are kept as marked rows."""
    from .config import validate

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kp in k_primes:
        sub = replace(
            cfg,
            reference=replace(cfg.reference, k_prime=int(kp), alphas=None),
            network=replace(cfg.network, d_star=int(kp)),
            out=str(out / f"k{kp}"),
        )
        try:
            validate(sub)
            res = run_experiment(sub)
            if res.exit_code == EXIT_OK:
                rows.append({"k_prime": int(kp), "linear": res.linear, "knn": res.knn, "status": "ok"})
            else:
                rows.append({"k_prime": int(kp), "linear": None, "knn": None, "status": f"failed (exit {res.exit_code}): {res.message}"})
        except ConfigError as exc:
            rows.append({"k_prime": int(kp), "linear": None, "knn": None, "status": f"failed (exit {EXIT_CONFIG}): {exc}"})
    write_ablation_csv(out / "ablation.csv", rows)
    return rows


def write_ablation_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow(
                [r["k_prime"], "" if r["linear"] is None else repr(r["linear"]), "" if r["knn"] is None else repr(r["knn"]), r["status"]]
            )
