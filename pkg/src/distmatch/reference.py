"""The K'-part spherical reference distribution.

Part ``i`` is centred on ``sign_i * e_i``; a draw perturbs the centre by a
uniform direction of length ``epsilon`` and projects back onto the sphere of
radius ``radius``. Parts are mixed with weights ``alphas``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rng import substream


class ReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceSpec:
    d_star: int
    k_prime: int
    radius: float
    epsilon: float
    alphas: tuple[float, ...]
    signs: tuple[int, ...]
    seed: int

    def centers(self) -> np.ndarray:
        """(K', d*) array of signed axis centres scaled to the radius."""
        c = np.zeros((self.k_prime, self.d_star))
        c[np.arange(self.k_prime), np.arange(self.k_prime)] = self.signs
        return self.radius * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        d["signs"] = list(self.signs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceSpec":
        spec = cls(
            d_star=int(d["d_star"]),
            k_prime=int(d["k_prime"]),
            radius=float(d["radius"]),
            epsilon=float(d["epsilon"]),
            alphas=tuple(float(a) for a in d["alphas"]),
            signs=tuple(int(s) for s in d["signs"]),
            seed=int(d["seed"]),
        )
        _validate(spec.d_star, spec.k_prime, spec.radius, spec.epsilon, spec.alphas)
        if len(spec.signs) != spec.k_prime or any(s not in (-1, 1) for s in spec.signs):
            raise ReferenceError("signs must be K' values in {-1, +1}")
        return spec


def _validate(d_star, k_prime, radius, epsilon, alphas) -> None:
    if d_star < 1 or k_prime < 1:
        raise ReferenceError("d_star and k_prime must be positive")
    if k_prime > d_star:
        raise ReferenceError(f"k_prime ({k_prime}) must not exceed d_star ({d_star})")
    if not radius > 0:
        raise ReferenceError("radius must be positive")
    if not 0 < epsilon < 1:
        raise ReferenceError("epsilon must lie in (0, 1)")
    a = np.asarray(alphas, dtype=np.float64)
    if a.shape != (k_prime,) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-12:
        raise ReferenceError("alphas must be K' nonnegative weights summing to 1")


def build_reference(
    d_star: int,
    k_prime: int,
    radius: float = 1.0,
    epsilon: float = 1e-3,
    alphas=None,
    seed: int = 0,
) -> ReferenceSpec:
    if alphas is None:
        alphas = np.full(k_prime, 1.0 / k_prime)
    _validate(d_star, k_prime, radius, epsilon, alphas)
    signs = substream(seed, "reference/signs").choice(np.array([-1, 1]), size=k_prime)
    return ReferenceSpec(
        d_star=int(d_star),
        k_prime=int(k_prime),
        radius=float(radius),
        epsilon=float(epsilon),
        alphas=tuple(float(a) for a in alphas),
        signs=tuple(int(s) for s in signs),
        seed=int(seed),
    )


@dataclass(frozen=True)
class ReferenceSample:
    points: np.ndarray
    part_ids: np.ndarray  # 1-based


def sample_reference(spec: ReferenceSpec, n: int, rng: np.random.Generator) -> ReferenceSample:
    if n < 1:
        raise ReferenceError("n must be at least 1")
    parts = rng.choice(spec.k_prime, size=n, p=np.asarray(spec.alphas))
    gamma = rng.standard_normal((n, spec.d_star))
    gamma /= np.linalg.norm(gamma, axis=1, keepdims=True)
    x = spec.epsilon * gamma
    x[np.arange(n), parts] += np.asarray(spec.signs, dtype=np.float64)[parts]
    x = spec.radius * x / np.linalg.norm(x, axis=1, keepdims=True)
    return ReferenceSample(points=x, part_ids=parts + 1)


def nearest_part(spec: ReferenceSpec, points: np.ndarray) -> np.ndarray:
    """1-based index of the closest signed centre for each row."""
    scores = np.asarray(points)[:, : spec.k_prime] * np.asarray(spec.signs)
    return np.argmax(scores, axis=1) + 1


def write_sample_csv(path: str | Path, sample: ReferenceSample) -> None:
    d = sample.points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + ["part_id"])
        for row, pid in zip(sample.points, sample.part_ids):
            w.writerow([repr(float(v)) for v in row] + [int(pid)])
