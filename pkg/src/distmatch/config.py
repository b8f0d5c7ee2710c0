"""Run configuration: a JSON document with one section per pipeline stage.

Every problem found while loading is reported against its dotted field path
(``reference.k_prime``), and the whole document is checked before any
computation starts. Unknown keys are errors, so typos do not silently fall
back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .trainer import TrainConfig

TOY_MEANS = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataSection:
    kind: str = "mixture"  # mixture | cifar10
    d: int = 2
    K: int = 4
    n: int = 512
    class_means: tuple[tuple[float, ...], ...] | None = TOY_MEANS
    spread: float = 0.05
    class_probs: tuple[float, ...] | None = None
    target_mean_shift: float = 0.02
    target_prob_shift: tuple[float, ...] | None = None
    target_per_class: int = 10
    target_test: int = 400
    cifar_train: tuple[str, ...] = ()
    cifar_test: tuple[str, ...] = ()
    cifar_limit: int | None = None


@dataclass(frozen=True)
class AugmentSection:
    m: int = 8
    kinds: tuple[str, ...] = ("noise", "scale")
    noise_std: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    mask_prob: float = 0.1
    crop_area: tuple[float, float] = (0.2, 1.0)
    aspect: tuple[float, float] = (0.75, 4 / 3)
    flip: bool = True


@dataclass(frozen=True)
class ReferenceSection:
    k_prime: int = 4
    radius: float = 1.0
    epsilon: float = 1e-3
    alphas: tuple[float, ...] | None = None


@dataclass(frozen=True)
class NetworkSection:
    d_star: int = 4
    encoder_hidden: tuple[int, ...] = (32, 32)
    head_hidden: int = 32
    critic_hidden: tuple[int, ...] | None = (32, 32)


@dataclass(frozen=True)
class TrainerSection:
    lam: float = 1.0
    eta: float = 1.0
    encoder_lr: float = 1e-3
    critic_lr: float = 1e-2
    encoder_weight_decay: float = 1e-4
    critic_weight_decay: float = 1e-4
    critic_betas: tuple[float, float] = (0.5, 0.9)
    batch_size: int = 128
    epochs: int = 200
    critic_period: int = 1
    critic_steps: int = 3
    critic_warmup: int = 200
    warmup_steps: int = 40
    wasserstein_mode: str = "dual_gp"
    wasserstein_on: str = "encoder"
    cost: str = "l2"
    sinkhorn_reg: float = 1e-2
    record_wall_time: bool = False
    checkpoint_every: int = 0  # 0: final checkpoint only


@dataclass(frozen=True)
class EvalSection:
    probe: str = "centroid"  # centroid | trained
    probe_epochs: int = 500
    knn_k: int = 5
    eps_grid: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0)
    sigma_grid: tuple[float, ...] = (0.8, 0.9, 1.0)
    sigma: float = 0.9
    psi_eps: float = 0.1
    trace_gram: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    reference: ReferenceSection = field(default_factory=ReferenceSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "runs/toy"
    seed: int = 0

    def train_config(self) -> TrainConfig:
        t = asdict(self.trainer)
        t.pop("checkpoint_every")
        return TrainConfig(**t, seed=self.seed)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, out: str | None = None, seed: int | None = None) -> "RunConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        return cfg


SECTIONS = {
    "data": DataSection,
    "augment": AugmentSection,
    "reference": ReferenceSection,
    "network": NetworkSection,
    "trainer": TrainerSection,
    "eval": EvalSection,
}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# --- parsing -----------------------------------------------------------------------------------

def _coerce(path: str, value: Any, annotation: str):
    """Convert a JSON value to the type named by the field annotation."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "must not be null")
    if annotation.startswith("tuple[tuple"):
        if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
            raise ConfigError(path, "expected a list of lists of numbers")
        return tuple(tuple(_number(f"{path}[{i}]", v) for v in row) for i, row in enumerate(value))
    if annotation.startswith("tuple"):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        inner = annotation[len("tuple[") :].split(",")[0].strip("] ")
        if inner == "str":
            if not all(isinstance(v, str) for v in value):
                raise ConfigError(path, "expected a list of strings")
            return tuple(value)
        if inner == "int":
            return tuple(_integer(f"{path}[{i}]", v) for i, v in enumerate(value))
        return tuple(_number(f"{path}[{i}]", v) for i, v in enumerate(value))
    if annotation.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if annotation.startswith("int"):
        return _integer(path, value)
    if annotation.startswith("float"):
        return _number(path, value)
    if annotation.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    return value


def _number(path, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    return float(v)


def _integer(path, v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        if isinstance(v, float) and v.is_integer():
            return int(v)
        raise ConfigError(path, f"expected an integer, got {v!r}")
    return v


def _section(name: str, cls, raw) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
    kw = {}
    for key, value in raw.items():
        kw[key] = _coerce(f"{name}.{key}", value, str(known[key].type))
    return cls(**kw)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in SECTIONS and key not in ("out", "seed"):
            raise ConfigError(key, "unknown section")
    kw = {name: _section(name, cls, raw[name]) for name, cls in SECTIONS.items() if name in raw}
    if "out" in raw:
        kw["out"] = _coerce("out", raw["out"], "str")
    if "seed" in raw:
        kw["seed"] = _integer("seed", raw["seed"])
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def load(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return from_dict(raw)


# --- validation --------------------------------------------------------------------------------

def validate(cfg: RunConfig) -> None:
    """Raise ConfigError for the first violated invariant, in document order."""
    d, a, r, n, t, e = cfg.data, cfg.augment, cfg.reference, cfg.network, cfg.trainer, cfg.eval

    def need(ok, path, msg):
        if not ok:
            raise ConfigError(path, msg)

    need(d.kind in ("mixture", "cifar10"), "data.kind", "must be mixture or cifar10")
    if d.kind == "mixture":
        need(d.d >= 1, "data.d", "must be >= 1")
        need(d.K >= 1, "data.K", "must be >= 1")
        need(d.n >= 2, "data.n", "must be >= 2")
        need(d.class_means is not None, "data.class_means", "required for the mixture generator")
        need(len(d.class_means) >= d.K, "data.class_means", f"needs at least K={d.K} rows")
        need(all(len(m) == d.d for m in d.class_means), "data.class_means", f"rows must have d={d.d} entries")
        need(all(0 <= v <= 1 for m in d.class_means for v in m), "data.class_means", "must lie in [0, 1]")
        need(d.spread >= 0, "data.spread", "must be >= 0")
        if d.class_probs is not None:
            need(len(d.class_probs) == d.K, "data.class_probs", f"needs K={d.K} entries")
            need(
                all(p >= 0 for p in d.class_probs) and abs(sum(d.class_probs) - 1) <= 1e-9,
                "data.class_probs",
                "must be nonnegative and sum to 1",
            )
        if d.target_prob_shift is not None:
            need(len(d.target_prob_shift) == d.K, "data.target_prob_shift", f"needs K={d.K} entries")
    else:
        need(len(d.cifar_train) > 0, "data.cifar_train", "list the training batch files")
        need(len(d.cifar_test) > 0, "data.cifar_test", "list the test batch files")
        need(d.cifar_limit is None or d.cifar_limit >= 2, "data.cifar_limit", "must be >= 2")
    need(d.target_per_class >= 1, "data.target_per_class", "must be >= 1")
    need(d.target_test >= 1, "data.target_test", "must be >= 1")

    need(a.m >= 1, "augment.m", "must be >= 1")
    allowed = {"noise", "scale", "mask", "hflip", "crop_resize"}
    need(len(a.kinds) >= 1 and set(a.kinds) <= allowed, "augment.kinds", f"each must be one of {sorted(allowed)}")
    if d.kind == "mixture":
        need(not ({"hflip", "crop_resize"} & set(a.kinds)), "augment.kinds", "image transforms need cifar10 data")
    need(a.noise_std >= 0, "augment.noise_std", "must be >= 0")
    need(len(a.scale_range) == 2 and 0 < a.scale_range[0] <= a.scale_range[1], "augment.scale_range", "need 0 < lo <= hi")
    need(0 <= a.mask_prob < 1, "augment.mask_prob", "must lie in [0, 1)")
    need(len(a.crop_area) == 2 and 0 < a.crop_area[0] <= a.crop_area[1] <= 1, "augment.crop_area", "need 0 < lo <= hi <= 1")
    need(len(a.aspect) == 2 and 0 < a.aspect[0] <= a.aspect[1], "augment.aspect", "need 0 < lo <= hi")

    need(n.d_star >= 1, "network.d_star", "must be >= 1")
    need(all(h >= 1 for h in n.encoder_hidden), "network.encoder_hidden", "widths must be >= 1")
    need(n.head_hidden >= 1, "network.head_hidden", "must be >= 1")
    need(n.critic_hidden is None or all(h >= 1 for h in n.critic_hidden), "network.critic_hidden", "widths must be >= 1")

    need(r.k_prime >= 1, "reference.k_prime", "must be >= 1")
    need(r.k_prime <= n.d_star, "reference.k_prime", f"must not exceed network.d_star ({n.d_star}), got {r.k_prime}")
    need(r.radius > 0, "reference.radius", "must be > 0")
    need(0 < r.epsilon < 1, "reference.epsilon", "must lie in (0, 1)")
    if r.alphas is not None:
        need(len(r.alphas) == r.k_prime, "reference.alphas", f"needs k_prime={r.k_prime} entries")
        need(all(x >= 0 for x in r.alphas) and abs(sum(r.alphas) - 1) <= 1e-12, "reference.alphas", "must be nonnegative and sum to 1")

    for fname, msg in cfg.train_config().validate():
        raise ConfigError(f"trainer.{fname}", msg)
    need(t.checkpoint_every >= 0, "trainer.checkpoint_every", "must be >= 0")

    need(e.probe in ("centroid", "trained"), "eval.probe", "must be centroid or trained")
    need(e.probe_epochs >= 0, "eval.probe_epochs", "must be >= 0")
    need(e.knn_k >= 1, "eval.knn_k", "must be >= 1")
    n_classes = d.K if d.kind == "mixture" else 10
    need(e.knn_k <= d.target_per_class * n_classes, "eval.knn_k", "exceeds the labeled target set size")
    need(all(x > 0 for x in e.eps_grid), "eval.eps_grid", "entries must be > 0")
    need(all(0 < s <= 1 for s in e.sigma_grid), "eval.sigma_grid", "entries must lie in (0, 1]")
    need(0 < e.sigma <= 1, "eval.sigma", "must lie in (0, 1]")
    need(e.psi_eps > 0, "eval.psi_eps", "must be > 0")
