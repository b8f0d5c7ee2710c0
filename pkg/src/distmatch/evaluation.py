"""Transfer probes (nearest centroid, trained linear, k-NN) and separation diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentationSet, sample_views
from .data import LabeledDataset
from .nn import EncoderStack, encode_array
from .optim import AdamState, LRSchedule, adam_step
from .rng import substream


class EvalError(ValueError):
    pass


@dataclass
class ProbeModel:
    W: np.ndarray  # (K, d*)
    kind: str = "centroid"

    def scores(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.W.T

    def predict_reps(self, z: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lowest class
        return np.argmax(self.scores(z), axis=1) + 1


@dataclass
class KNNModel:
    reps: np.ndarray
    labels: np.ndarray
    k: int = 5

    def predict_reps(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        d2 = (z * z).sum(1)[:, None] + (self.reps * self.reps).sum(1)[None, :] - 2 * z @ self.reps.T
        # stable sort: equal distances keep the lower train index first
        nearest = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        K = int(self.labels.max())
        out = np.empty(len(z), dtype=np.int64)
        for i, idx in enumerate(nearest):
            out[i] = int(np.argmax(np.bincount(self.labels[idx], minlength=K + 1)[1:])) + 1
        return out


# --- probes --------------------------------------------------------------------------

def class_centroids(reps: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    rows = []
    for k in range(1, n_classes + 1):
        mask = labels == k
        if not mask.any():
            raise EvalError(f"class {k} has no labeled samples")
        rows.append(reps[mask].mean(axis=0))
    return np.stack(rows)


def fit_centroid_probe(
    stack: EncoderStack, x1: np.ndarray, x2: np.ndarray, labels, n_classes: int | None = None
) -> ProbeModel:
    """Rows are per-class means of both views' encoder representations (head removed)."""
    labels = np.asarray(labels, dtype=np.int64)
    K = n_classes or int(labels.max())
    z = np.concatenate([encode_array(stack, x1), encode_array(stack, x2)])
    return ProbeModel(class_centroids(z, np.concatenate([labels, labels]), K), "centroid")


def labeled_views(data: LabeledDataset, aug: AugmentationSet, seed: int, name: str = "probe/views"):
    x1, x2 = sample_views(aug, data.points, substream(seed, name))
    return x1, x2, data.labels


def predict(probe: ProbeModel, stack: EncoderStack, x: np.ndarray) -> np.ndarray:
    return probe.predict_reps(encode_array(stack, np.atleast_2d(x)))


def fit_trained_probe(
    stack: EncoderStack,
    data: LabeledDataset,
    epochs: int = 500,
    schedule: LRSchedule | None = None,
    weight_decay: float = 5e-6,
    batch_size: int = 256,
    seed: int = 0,
) -> ProbeModel:
    """Softmax-regression probe on frozen representations, trained with Adam."""
    K = data.n_classes
    for k in range(1, K + 1):
        if not np.any(data.labels == k):
            raise EvalError(f"class {k} has no labeled samples")
    z = encode_array(stack, data.points)
    n, d = z.shape
    bs = min(batch_size, n)
    per_epoch = math.ceil(n / bs)
    if schedule is None:
        schedule = LRSchedule("exp_decay", 1e-2, end=1e-6, total_steps=max(1, epochs * per_epoch))
    rng = substream(seed, "probe/init")
    params = {"probe.w": T.parameter(rng.normal(scale=1.0 / math.sqrt(d), size=(d, K)), "probe.w")}
    opt = AdamState(schedule, weight_decay=weight_decay)
    for epoch in range(epochs):
        order = substream(seed, f"probe/epoch/{epoch}").permutation(n)
        for b in range(per_epoch):
            idx = order[b * bs : (b + 1) * bs]
            loss = T.softmax_cross_entropy(T.matmul(T.constant(z[idx]), params["probe.w"]), data.labels[idx] - 1)
            params = adam_step(opt, params, T.backward(loss, params))
    return ProbeModel(params["probe.w"].data.T.copy(), "trained")


def knn_predict(stack: EncoderStack, train: LabeledDataset, x: np.ndarray, k: int = 5) -> np.ndarray:
    return fit_knn(stack, train, k).predict_reps(encode_array(stack, np.atleast_2d(x)))


def fit_knn(stack: EncoderStack, train: LabeledDataset, k: int = 5) -> KNNModel:
    if len(train) == 0:
        raise EvalError("k-NN needs a non-empty training set")
    if k > len(train):
        raise EvalError(f"k={k} exceeds the training set size {len(train)}")
    return KNNModel(encode_array(stack, train.points), train.labels, k)


def err_rate(model, stack: EncoderStack, test: LabeledDataset) -> float:
    """Fraction of test points the probe (or k-NN model) misclassifies."""
    if len(test) == 0:
        raise EvalError("empty test set")
    pred = model.predict_reps(encode_array(stack, test.points))
    return float(np.mean(pred != test.labels))


# --- diagnostics -------------------------------------------------------------------------

def gram_from_centroids(mu: np.ndarray) -> tuple[np.ndarray, float]:
    G = mu @ mu.T
    G = 0.5 * (G + G.T)
    off = np.abs(G - np.diag(np.diag(G)))
    return G, float(off.max()) if len(G) > 1 else 0.0


def gram_diagnostic(stack: EncoderStack, x1: np.ndarray, x2: np.ndarray, labels, n_classes=None):
    """Centroid Gram matrix over augmented views and its largest off-diagonal magnitude."""
    probe = fit_centroid_probe(stack, x1, x2, labels, n_classes)
    return gram_from_centroids(probe.W)


def u_t_estimate(stack: EncoderStack, x: np.ndarray, aug: AugmentationSet, eps_grid) -> list[float]:
    """For each eps, the fraction of points whose largest view-to-view representation distance exceeds eps."""
    V = aug.views(x)
    n, M, d = V.shape
    Z = encode_array(stack, V.reshape(n * M, d)).reshape(n, M, -1)
    diff = Z[:, :, None, :] - Z[:, None, :, :]
    spread = np.sqrt((diff * diff).sum(axis=3)).max(axis=(1, 2))
    return [float(np.mean(spread > e)) for e in eps_grid]


@dataclass(frozen=True)
class PsiResult:
    gamma_min: float
    psi: float


def psi_threshold(
    sigma: float,
    delta: float,
    eps: float,
    R: float,
    L_hat: float,
    u_t: float,
    min_p: float,
    min_centroid_normsq: float,
    max_centroid_err: float,
) -> PsiResult:
    """Separation threshold for the equal-radius case.

    gamma = (2 sigma - 1) - U/p - (sigma - U/p)(L delta / R + 2 eps / R)
    psi   = gamma - sqrt(2 - 2 gamma) - (1 - min|mu|^2 / R) / 2 - 2 max|mu_hat - mu| / R
    """
    if not min_p > 0:
        raise EvalError("min_p must be positive")
    ratio = u_t / min_p
    gamma = (2 * sigma - 1) - ratio - (sigma - ratio) * (L_hat * delta / R + 2 * eps / R)
    if gamma > 1:
        raise EvalError(f"gamma_min = {gamma!r} exceeds 1; the threshold formula is undefined there")
    psi = gamma - math.sqrt(2 - 2 * gamma) - 0.5 * (1 - min_centroid_normsq / R) - 2 * max_centroid_err / R
    return PsiResult(gamma, psi)


DIAGNOSTICS_SCHEMA = 1  # bump when keys change


@dataclass
class DiagnosticsReport:
    gram: list[list[float]]
    max_offdiag_abs: float
    u_t: dict[str, float]
    gamma_min: float | None
    psi: float | None
    separation_condition: bool | None
    err_estimate: float
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"schema_version": DIAGNOSTICS_SCHEMA, **asdict(self)}, indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def write_accuracy_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "dataset", "linear", "knn"])
        for r in rows:
            w.writerow([r["method"], r["dataset"], repr(r["linear"]), repr(r["knn"])])
