"""Adam with decoupled weight decay and the learning-rate schedules used in training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class LRSchedule:
    """Learning rate as a function of the optimizer step (0-based).

    ``constant``: always ``base``.
    ``warmup``: ``base * (step + 1) / warmup_steps`` until warm-up ends, then ``base``.
    ``exp_decay``: geometric interpolation from ``base`` to ``end`` over ``total_steps``.
    """

    kind: str = "constant"
    base: float = 1e-3
    warmup_steps: int = 0
    end: float = 1e-6
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "warmup", "exp_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base < 0:
            raise ValueError("learning rate must be nonnegative")

    def __call__(self, step: int) -> float:
        if self.kind == "warmup" and step < self.warmup_steps:
            return self.base * (step + 1) / self.warmup_steps
        if self.kind == "exp_decay":
            if self.total_steps <= 1:
                return self.base
            t = min(step, self.total_steps - 1) / (self.total_steps - 1)
            return self.base * math.exp(t * math.log(self.end / self.base))
        return self.base


@dataclass
class AdamState:
    schedule: LRSchedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """One Adam update; returns fresh parameter tensors and advances ``state.step``."""
    lr = state.schedule(state.step)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new = p.data - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)
        updated[name] = Tensor(new, requires_grad=True, name=name)
    state.step = t
    return updated
