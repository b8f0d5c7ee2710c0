"""Finite augmentation sets, augmented-pair sampling and (sigma, delta) estimation.

Every transform has its random parameters drawn once at construction, so the
set is a fixed list of M deterministic maps with the identity first. That
makes the min-over-views distance computable exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream


@dataclass(frozen=True)
class Transform:
    kind: str
    params: dict = field(default_factory=dict)
    image_shape: tuple[int, int, int] | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x
        if self.kind == "noise":
            return np.clip(x + self.params["offset"], 0.0, 1.0)
        if self.kind == "scale":
            return np.clip(x * self.params["factor"], 0.0, 1.0)
        if self.kind == "mask":
            return x * self.params["keep"]
        if self.kind == "hflip":
            return _as_images(x, self.image_shape)[..., ::-1].reshape(x.shape)
        if self.kind == "crop_resize":
            out = _crop_resize(_as_images(x, self.image_shape), self.params["box"])
            if self.params.get("flip"):
                out = out[..., ::-1]
            return out.reshape(x.shape)
        raise ValueError(f"unknown transform kind {self.kind!r}")


def _as_images(x: np.ndarray, shape) -> np.ndarray:
    if shape is None:
        raise ValueError("image transforms need image_shape")
    return x.reshape(x.shape[:-1] + tuple(shape))


def _crop_resize(img: np.ndarray, box) -> np.ndarray:
    """Bilinear resize of the crop back to full size, corners aligned."""
    top, left, h, w = box
    H, W = img.shape[-2:]
    ys = top + np.linspace(0.0, h - 1.0, H)
    xs = left + np.linspace(0.0, w - 1.0, W)
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x1[None, :]]
    c = img[..., y1[:, None], x0[None, :]]
    d = img[..., y1[:, None], x1[None, :]]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


@dataclass(frozen=True)
class AugmentConfig:
    m: int = 8
    kinds: tuple[str, ...] = ("noise", "scale")
    noise_std: float = 0.02
    scale_range: tuple[float, float] = (0.9, 1.1)
    mask_prob: float = 0.1
    crop_area: tuple[float, float] = (0.2, 1.0)
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip: bool = True
    image_shape: tuple[int, int, int] | None = None
    seed: int = 0


@dataclass(frozen=True)
class AugmentationSet:
    transforms: tuple[Transform, ...]

    def __post_init__(self):
        if not self.transforms or self.transforms[0].kind != "identity":
            raise ValueError("an augmentation set must start with the identity")

    def __len__(self) -> int:
        return len(self.transforms)

    def views(self, x: np.ndarray) -> np.ndarray:
        """All M views of every row: shape (n, M, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([t(x) for t in self.transforms], axis=1)


def build_augmentations(cfg: AugmentConfig, dim: int) -> AugmentationSet:
    rng = substream(cfg.seed, "augment/build")
    out = [Transform("identity")]
    for i in range(cfg.m - 1):
        kind = cfg.kinds[i % len(cfg.kinds)]
        if kind == "noise":
            out.append(Transform("noise", {"offset": cfg.noise_std * rng.standard_normal(dim)}))
        elif kind == "scale":
            out.append(Transform("scale", {"factor": rng.uniform(*cfg.scale_range, size=dim)}))
        elif kind == "mask":
            out.append(Transform("mask", {"keep": (rng.random(dim) >= cfg.mask_prob).astype(np.float64)}))
        elif kind == "hflip":
            out.append(Transform("hflip", image_shape=cfg.image_shape))
        elif kind == "crop_resize":
            out.append(Transform("crop_resize", _draw_crop(rng, cfg), image_shape=cfg.image_shape))
        else:
            raise ValueError(f"unknown augmentation kind {kind!r}")
    return AugmentationSet(tuple(out))


def _draw_crop(rng: np.random.Generator, cfg: AugmentConfig) -> dict:
    if cfg.image_shape is None:
        raise ValueError("crop_resize needs image_shape")
    _, H, W = cfg.image_shape
    for _ in range(100):
        area = rng.uniform(*cfg.crop_area) * H * W
        ratio = math.exp(rng.uniform(math.log(cfg.aspect[0]), math.log(cfg.aspect[1])))
        w = math.sqrt(area * ratio)
        h = math.sqrt(area / ratio)
        if 1 <= w <= W and 1 <= h <= H:
            break
    else:
        h, w = float(H), float(W)
    top = rng.uniform(0, H - h)
    left = rng.uniform(0, W - w)
    return {"box": (top, left, h, w), "flip": bool(cfg.flip and rng.random() < 0.5)}


def sample_views(aug: AugmentationSet, x: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two views per row, each from an independent uniform draw of the transform index."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    idx = rng.integers(0, len(aug), size=(2, n))
    out = [np.empty_like(x), np.empty_like(x)]
    for v in range(2):
        for t in np.unique(idx[v]):
            rows = idx[v] == t
            out[v][rows] = aug.transforms[t](x[rows])
    return out[0], out[1]


def d_A(aug: AugmentationSet, x1: np.ndarray, x2: np.ndarray) -> float:
    """Smallest Euclidean distance between any view of x1 and any view of x2."""
    v1 = aug.views(np.asarray(x1)[None])[0]
    v2 = aug.views(np.asarray(x2)[None])[0]
    diff = v1[:, None, :] - v2[None, :, :]
    return float(np.sqrt((diff * diff).sum(axis=2)).min())


def d_A_matrix(aug: AugmentationSet, x: np.ndarray) -> np.ndarray:
    """Pairwise augmentation distance over the rows of ``x``."""
    V = aug.views(x)
    n, M, d = V.shape
    flat = V.reshape(n * M, d)
    sq = (flat * flat).sum(axis=1)
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2 * flat @ flat.T, 0.0)
    D = np.sqrt(D2.reshape(n, M, n, M).min(axis=(1, 3)))
    D = np.minimum(D, D.T)
    np.fill_diagonal(D, 0.0)
    return D


@dataclass
class SigmaDeltaReport:
    rows: list[dict]
    masks: dict[tuple[int, float], np.ndarray]
    coverage: str = "not-checked"

    def delta(self, k: int, sigma: float) -> float:
        for r in self.rows:
            if r["class"] == k and r["sigma"] == sigma:
                return r["delta"]
        raise KeyError((k, sigma))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "sigma", "delta", "kept_count"])
            for r in self.rows:
                w.writerow([r["class"], repr(r["sigma"]), repr(r["delta"]), r["kept_count"]])


def _greedy_removal_order(D: np.ndarray) -> list[int]:
    """Indices in the order greedy trimming discards them (largest max-over-partner first).

    The max is shared by both ends of the longest pair, so ties are broken by
    the total distance to the surviving points.
    """
    alive = np.ones(D.shape[0], dtype=bool)
    order = []
    for _ in range(D.shape[0]):
        live = alive[:, None] & alive[None, :]
        worst = np.where(live, D, -np.inf).max(axis=1)
        total = np.where(live, D, 0.0).sum(axis=1)
        worst[~alive] = -np.inf
        i = int(np.lexsort((-total, -worst))[0])
        order.append(i)
        alive[i] = False
    return order


def estimate_sigma_delta(
    aug: AugmentationSet,
    points: np.ndarray,
    labels: np.ndarray,
    sigma_grid,
    disjoint_classes: bool = False,
) -> SigmaDeltaReport:
    """Greedy main parts and their augmentation diameters, per class and sigma.

    The delta reported is an upper bound on the best achievable delta because the
    main part is chosen greedily rather than by subset search.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    rows, masks = [], {}
    for k in sorted(np.unique(labels).tolist()):
        idx = np.flatnonzero(labels == k)
        n = idx.size
        if n < 2:
            for s in sigma_grid:
                rows.append({"class": int(k), "sigma": float(s), "delta": 0.0, "kept_count": int(n), "flag": "too-few"})
                masks[(int(k), float(s))] = np.ones(n, dtype=bool)
            continue
        D = d_A_matrix(aug, points[idx])
        order = _greedy_removal_order(D)
        for s in sigma_grid:
            keep = max(1, math.ceil(float(s) * n - 1e-9))
            mask = np.ones(n, dtype=bool)
            mask[order[: n - keep]] = False
            sub = D[np.ix_(mask, mask)]
            rows.append(
                {"class": int(k), "sigma": float(s), "delta": float(sub.max()), "kept_count": int(keep), "flag": ""}
            )
            masks[(int(k), float(s))] = mask
    return SigmaDeltaReport(rows, masks, coverage="implied-by-disjoint-classes" if disjoint_classes else "not-checked")


def transform_lipschitz(aug: AugmentationSet, x: np.ndarray, rng: np.random.Generator, pairs: int = 256) -> list[float]:
    """Per transform, the largest observed ||A(x1) - A(x2)|| / ||x1 - x2||."""
    x = np.asarray(x, dtype=np.float64)
    i = rng.integers(0, len(x), size=pairs)
    j = rng.integers(0, len(x), size=pairs)
    ok = np.linalg.norm(x[i] - x[j], axis=1) > 0
    i, j = i[ok], j[ok]
    base = np.linalg.norm(x[i] - x[j], axis=1)
    return [float(np.max(np.linalg.norm(t(x[i]) - t(x[j]), axis=1) / base)) if base.size else 0.0 for t in aug.transforms]
