"""Synthetic Gaussian-blob datasets with controllable shift, CIFAR-10 binary ingestion
and class-conditional shift estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .ot import CostKind, DiscreteMeasure, mallows_exact
from .rng import substream

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class DataError(ValueError):
    pass


@dataclass
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray  # 1-based
    role: str = "source"
    n_classes: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or len(self.points) != len(self.labels):
            raise DataError("points must be (n, d) with one label per row")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.n_classes):
            raise DataError(f"labels must lie in [1, {self.n_classes}]")
        if self.role not in ("source", "target"):
            raise DataError(f"role must be source or target, got {self.role!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def class_points(self, k: int) -> np.ndarray:
        return self.points[self.labels == k]

    def class_freqs(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:] / max(len(self), 1)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.points[idx], self.labels[idx], self.role, self.n_classes)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label"] + [f"x{i + 1}" for i in range(self.dim)])
            for y, row in zip(self.labels, self.points):
                w.writerow([int(y)] + [repr(float(v)) for v in row])


@dataclass(frozen=True)
class MixtureSpec:
    d: int
    K: int
    n: int
    class_means: tuple[tuple[float, ...], ...]
    spread: float
    class_probs: tuple[float, ...] | None = None
    seed: int = 0
    role: str = "source"

    def probs(self) -> np.ndarray:
        if self.class_probs is None:
            return np.full(self.K, 1.0 / self.K)
        return np.asarray(self.class_probs, dtype=np.float64)


def _check_probs(p: np.ndarray, K: int) -> None:
    if p.shape != (K,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DataError(f"class probabilities must be {K} non-negative numbers summing to 1, got {p.tolist()}")


def generate(spec: MixtureSpec) -> LabeledDataset:
    means = np.asarray(spec.class_means, dtype=np.float64)
    if spec.K > len(means):
        raise DataError(f"K={spec.K} classes but only {len(means)} means given")
    means = means[: spec.K]
    if means.shape[1] != spec.d:
        raise DataError(f"means have dimension {means.shape[1]}, expected {spec.d}")
    if np.any(means < 0) or np.any(means > 1):
        raise DataError("class means must lie inside the unit box")
    if spec.spread < 0:
        raise DataError("spread must be non-negative")
    p = spec.probs()
    _check_probs(p, spec.K)
    rng = substream(spec.seed, f"data/{spec.role}")
    labels = rng.choice(spec.K, size=spec.n, p=p) + 1
    pts = means[labels - 1] + spec.spread * rng.standard_normal((spec.n, spec.d))
    return LabeledDataset(np.clip(pts, 0.0, 1.0), labels, spec.role, spec.K)


def gen_mixture(d, K, n, class_means, spread, class_probs=None, seed=0, role="source") -> LabeledDataset:
    means = tuple(tuple(float(v) for v in m) for m in class_means)
    probs = None if class_probs is None else tuple(float(v) for v in class_probs)
    return generate(MixtureSpec(d, K, n, means, float(spread), probs, seed, role))


def shifted_spec(source: MixtureSpec, mean_shift=0.0, prob_shift=None, seed: int | None = None) -> MixtureSpec:
    """Target spec: means displaced by ``mean_shift`` (scalar, vector or per-class matrix), probabilities
    moved by ``prob_shift``."""
    means = np.asarray(source.class_means, dtype=np.float64)[: source.K]
    means = means + np.broadcast_to(np.asarray(mean_shift, dtype=np.float64), means.shape)
    if np.any(means < 0) or np.any(means > 1):
        raise DataError("shifted means leave the unit box")
    p = source.probs()
    if prob_shift is not None:
        p = p + np.asarray(prob_shift, dtype=np.float64)
    _check_probs(p, source.K)
    return replace(
        source,
        class_means=tuple(tuple(float(v) for v in m) for m in means),
        class_probs=tuple(float(v) for v in p),
        seed=source.seed if seed is None else seed,
        role="target",
    )


def gen_shifted_target(source_spec: MixtureSpec, mean_shift=0.0, prob_shift=None, seed: int | None = None) -> LabeledDataset:
    return generate(shifted_spec(source_spec, mean_shift, prob_shift, seed))


@dataclass(frozen=True)
class ShiftEstimate:
    eps1: float
    eps2: float
    per_class_w: tuple[float, ...]


def estimate_shift(
    source: LabeledDataset,
    target: LabeledDataset,
    per_class_subsample: int = 256,
    cost: CostKind | str = CostKind.L2,
    seed: int = 0,
) -> ShiftEstimate:
    """Largest class-conditional transport distance and largest class-frequency gap.

    Both class clouds are subsampled to a common size m = min(cap, |S_k|, |T_k|), which keeps the
    exact solver on its assignment route.
    """
    K = max(source.n_classes, target.n_classes)
    ws = []
    for k in range(1, K + 1):
        s, t = source.class_points(k), target.class_points(k)
        if len(s) == 0 or len(t) == 0:
            side = "source" if len(s) == 0 else "target"
            raise DataError(f"class {k} is empty in the {side} dataset")
        m = min(per_class_subsample, len(s), len(t))
        s, t = _subsample(s, m, seed, k), _subsample(t, m, seed, k)
        ws.append(mallows_exact(DiscreteMeasure.uniform(s), DiscreteMeasure.uniform(t), cost)[0])
    ps = np.bincount(source.labels, minlength=K + 1)[1:] / len(source)
    pt = np.bincount(target.labels, minlength=K + 1)[1:] / len(target)
    return ShiftEstimate(float(max(ws)), float(np.abs(ps - pt).max()), tuple(float(w) for w in ws))


def _subsample(cloud: np.ndarray, m: int, seed: int, k: int) -> np.ndarray:
    # the stream depends only on the cloud's class and size, so argument order does not matter
    if m >= len(cloud):
        return cloud
    rng = substream(seed, f"shift/subsample/{k}/{len(cloud)}")
    return cloud[np.sort(rng.choice(len(cloud), m, replace=False))]


def load_cifar10(paths, limit: int | None = None, role: str = "source") -> LabeledDataset:
    """Read CIFAR-10 binary batches: pixels scaled to [0, 1] in channel-major order, labels 1..10."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, labels, total = [], [], 0
    for path in paths:
        raw = Path(path).read_bytes()
        whole = len(raw) // CIFAR_RECORD
        if len(raw) % CIFAR_RECORD:
            raise DataError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                f"partial record starts at byte offset {whole * CIFAR_RECORD}"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
        if limit is not None:
            rec = rec[: max(0, limit - total)]
        if rec.size and rec[:, 0].max() > 9:
            bad = int(np.argmax(rec[:, 0] > 9))
            raise DataError(f"{path}: label byte {rec[bad, 0]} out of range at byte offset {bad * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64) + 1)
        chunks.append(rec[:, 1:].astype(np.float64) / 255.0)
        total += len(rec)
        if limit is not None and total >= limit:
            break
    return LabeledDataset(np.concatenate(chunks), np.concatenate(labels), role, 10)


def read_dataset_csv(path: str | Path, role: str = "source") -> LabeledDataset:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return LabeledDataset(arr[:, 1:], arr[:, 0].astype(np.int64), role)
