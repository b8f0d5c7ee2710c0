"""The distribution-matching objective and its alternating mini-max training loop.

Encoder objective: alignment loss between paired views plus lambda times a
Wasserstein estimate between representations and the reference distribution.
The estimate is either the critic's dual value (trained with a gradient
penalty) or an exact / entropic minibatch transport cost with the plan held
fixed during differentiation.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import AugmentationSet, sample_views
from .data import LabeledDataset
from .nn import EncoderStack, criticize, encode, frozen, project
from .optim import AdamState, LRSchedule, adam_step
from .ot import DiscreteMeasure, mallows_exact, sinkhorn
from .reference import ReferenceSpec, sample_reference
from .rng import substream

MODES = ("dual_gp", "primal_exact", "primal_sinkhorn")
METRIC_COLUMNS = ["epoch", "align_loss", "wasserstein_estimate", "gp_term", "total_loss", "wall_time_s"]


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    # defaults are the large-scale image settings; toy configs override most of them
    lam: float = 1.0
    eta: float = 1.0
    encoder_lr: float = 3e-5
    critic_lr: float = 1e-3
    encoder_weight_decay: float = 1e-4
    critic_weight_decay: float = 1e-4
    critic_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 512
    epochs: int = 1000
    critic_period: int = 5
    critic_steps: int = 1
    critic_warmup: int = 0
    warmup_steps: int = 500
    wasserstein_mode: str = "dual_gp"
    wasserstein_on: str = "head"
    cost: str = "l2"
    sinkhorn_reg: float = 1e-2
    seed: int = 0
    record_wall_time: bool = False

    def validate(self) -> list[tuple[str, str]]:
        """(field, problem) pairs; empty when the config is usable."""
        bad = []
        if self.lam < 0:
            bad.append(("lam", "must be >= 0"))
        if self.eta < 0:
            bad.append(("eta", "must be >= 0"))
        if self.batch_size < 2:
            bad.append(("batch_size", "must be >= 2"))
        if self.critic_period < 1:
            bad.append(("critic_period", "must be >= 1"))
        if self.critic_steps < 1:
            bad.append(("critic_steps", "must be >= 1"))
        if self.critic_warmup < 0:
            bad.append(("critic_warmup", "must be >= 0"))
        if self.epochs < 0:
            bad.append(("epochs", "must be >= 0"))
        if self.warmup_steps < 0:
            bad.append(("warmup_steps", "must be >= 0"))
        if self.wasserstein_mode not in MODES:
            bad.append(("wasserstein_mode", f"must be one of {', '.join(MODES)}"))
        if self.wasserstein_on not in ("head", "encoder"):
            bad.append(("wasserstein_on", "must be head or encoder"))
        if self.cost not in ("l1", "l2"):
            bad.append(("cost", "must be l1 or l2"))
        if len(self.critic_betas) != 2 or not all(0 <= b < 1 for b in self.critic_betas):
            bad.append(("critic_betas", "must be two numbers in [0, 1)"))
        if not self.sinkhorn_reg > 0:
            bad.append(("sinkhorn_reg", "must be > 0"))
        for name in ("encoder_lr", "critic_lr", "encoder_weight_decay", "critic_weight_decay"):
            if getattr(self, name) < 0:
                bad.append((name, "must be >= 0"))
        return bad


@dataclass
class MetricsRecord:
    epoch: int
    align_loss: float
    wasserstein_estimate: float
    gp_term: float
    total_loss: float
    wall_time: float = 0.0

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.align_loss),
            repr(self.wasserstein_estimate),
            repr(self.gp_term),
            repr(self.total_loss),
            repr(self.wall_time),
        ]


def write_metrics_csv(path: str | Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


# --- loss pieces -----------------------------------------------------------------------

def alignment_loss(z1: T.Tensor, z2: T.Tensor) -> T.Tensor:
    """Mean squared distance between paired representation rows."""
    if z1.shape != z2.shape or z1.shape[0] == 0:
        raise T.ShapeError(f"alignment_loss: need equal non-empty batches, got {z1.shape} and {z2.shape}")
    return T.scale(T.sum_all(T.square(T.sub(z1, z2))), 1.0 / z1.shape[0])


def gradient_penalty(
    stack: EncoderStack,
    z_f: np.ndarray,
    z_r: np.ndarray,
    rng: np.random.Generator,
    params: dict[str, T.Tensor] | None = None,
    critic: Callable[[T.Tensor], T.Tensor] | None = None,
) -> T.Tensor:
    """Mean of (||grad g(xbar)|| - 1)^2 over rowwise random interpolates of z_f and z_r.

    ``critic`` overrides the stack's critic network (any row-wise map built from tape ops).
    """
    z_f, z_r = np.asarray(z_f, dtype=np.float64), np.asarray(z_r, dtype=np.float64)
    if z_f.shape != z_r.shape:
        raise T.ShapeError(f"gradient_penalty: representation batch {z_f.shape} vs reference {z_r.shape}")
    u = rng.random((z_f.shape[0], 1))
    xbar = T.watch(u * z_f + (1 - u) * z_r)
    g = critic(xbar) if critic is not None else criticize(stack, xbar, params)
    # a tiny floor keeps sqrt differentiable at a flat critic without shifting the penalty
    norms = T.row_norm(T.input_gradient(g, xbar), floor=1e-100)
    return T.scale(T.sum_all(T.square(T.add_const(norms, -1.0))), 1.0 / z_f.shape[0])


def _mean_critic(stack, z, params) -> T.Tensor:
    out = criticize(stack, z, params)
    return T.scale(T.sum_all(out), 1.0 / out.shape[0])


def dual_term(stack: EncoderStack, z_rep: T.Tensor, ref: np.ndarray, params=None) -> T.Tensor:
    """Critic mean over reference draws minus critic mean over representations."""
    return T.sub(_mean_critic(stack, T.constant(ref), params), _mean_critic(stack, z_rep, params))


def primal_term(z_rep: T.Tensor, ref: np.ndarray, config: TrainConfig) -> T.Tensor:
    """Minibatch transport cost with the optimal plan frozen (an envelope gradient)."""
    mu = DiscreteMeasure.uniform(z_rep.data)
    nu = DiscreteMeasure.uniform(ref)
    if config.wasserstein_mode == "primal_exact":
        _, coupling = mallows_exact(mu, nu, config.cost)
    else:
        _, coupling = sinkhorn(mu, nu, config.cost, reg=config.sinkhorn_reg)
    return T.plan_cost(z_rep, ref, coupling.plan, config.cost)


def representations(stack: EncoderStack, x1, x2, on: str = "head") -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Head outputs of both views (for alignment) and the stacked rows used by the Wasserstein term."""
    n = np.asarray(x1).shape[0]
    e = encode(stack, np.concatenate([x1, x2]))
    h = project(stack, e)
    h1, h2 = T.slice_rows(h, 0, n), T.slice_rows(h, n, 2 * n)
    return h1, h2, (h if on == "head" else e)


def total_loss(
    stack: EncoderStack,
    views: tuple[np.ndarray, np.ndarray],
    reference_batch: np.ndarray,
    config: TrainConfig,
) -> tuple[T.Tensor, dict[str, float]]:
    """Encoder objective: align + lam * W-estimate. The critic is held fixed."""
    h1, h2, z = representations(stack, views[0], views[1], config.wasserstein_on)
    align = alignment_loss(h1, h2)
    if config.lam == 0:
        w = T.constant(np.zeros(()))
    elif config.wasserstein_mode == "dual_gp":
        w = dual_term(stack, z, reference_batch, frozen(stack.group("critic")))
    else:
        w = primal_term(z, reference_batch, config)
    loss = T.add(align, T.scale(w, config.lam))
    return loss, {"align_loss": align.item(), "wasserstein_estimate": w.item(), "total_loss": loss.item()}


def critic_objective(
    stack: EncoderStack,
    z_rep: np.ndarray,
    z_view1: np.ndarray,
    reference_batch: np.ndarray,
    eta: float,
    rng: np.random.Generator,
) -> tuple[T.Tensor, float, float]:
    """-(dual estimate) + eta * GP, minimized over the critic; returns (loss, estimate, gp)."""
    w = dual_term(stack, T.constant(z_rep), reference_batch)
    gp = gradient_penalty(stack, z_view1, reference_batch[: len(z_view1)], rng)
    loss = T.add(T.scale(w, -1.0), T.scale(gp, eta))
    return loss, w.item(), gp.item()


# --- loop ------------------------------------------------------------------------------

@dataclass
class FitResult:
    stack: EncoderStack
    records: list[MetricsRecord] = field(default_factory=list)
    steps: int = 0


def reference_batch_size(config: TrainConfig, n: int) -> int:
    # the primal modes match both views at once, so they need one draw per view
    return n if config.wasserstein_mode == "dual_gp" else 2 * n


def fit(
    stack: EncoderStack,
    source: LabeledDataset,
    aug: AugmentationSet,
    reference: ReferenceSpec,
    config: TrainConfig,
    on_epoch: Callable[[int, EncoderStack], None] | None = None,
) -> FitResult:
    """Alternating updates: critic every ``critic_period`` steps, encoder and head every step."""
    bad = config.validate()
    if bad:
        raise ValueError("; ".join(f"{k}: {v}" for k, v in bad))
    if config.wasserstein_on == "head" and stack.config.head_widths[-1] != reference.d_star:
        raise ValueError("head output dimension must equal the reference dimension")
    stack = stack.copy()
    x = source.points
    bs = min(config.batch_size, len(x))
    per_epoch = len(x) // bs
    enc_opt = AdamState(
        LRSchedule("warmup", config.encoder_lr, warmup_steps=config.warmup_steps),
        weight_decay=config.encoder_weight_decay,
    )
    crit_opt = AdamState(
        LRSchedule("constant", config.critic_lr),
        beta1=config.critic_betas[0],
        beta2=config.critic_betas[1],
        weight_decay=config.critic_weight_decay,
    )
    result = FitResult(stack)
    step = 0
    gp_last = 0.0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = substream(config.seed, f"shuffle/epoch/{epoch}").permutation(len(x))
        sums = np.zeros(3)
        gps = []
        for b in range(per_epoch):
            xb = x[order[b * bs : (b + 1) * bs]]
            views = sample_views(aug, xb, substream(config.seed, f"augment/step/{step}"))
            ref = sample_reference(
                reference, reference_batch_size(config, bs), substream(config.seed, f"reference/step/{step}")
            ).points
            try:
                if config.wasserstein_mode == "dual_gp" and config.lam > 0 and step % config.critic_period == 0:
                    extra = config.critic_warmup if step == 0 else 0
                    gp_last = _critic_update(stack, crit_opt, views, ref, config, step, config.critic_steps + extra)
                    gps.append(gp_last)
                loss, parts = total_loss(stack, views, ref, config)
                if not np.isfinite(parts["total_loss"]):
                    raise DivergenceError(step, "total loss is not finite")
                params = {**stack.group("encoder"), **stack.group("head")}
                stack.update(adam_step(enc_opt, params, T.backward(loss, params)))
            except FloatingPointError as exc:
                raise DivergenceError(step, str(exc)) from exc
            sums += [parts["align_loss"], parts["wasserstein_estimate"], parts["total_loss"]]
            step += 1
        m = sums / max(per_epoch, 1)
        result.records.append(
            MetricsRecord(
                epoch=epoch,
                align_loss=float(m[0]),
                wasserstein_estimate=float(m[1]),
                gp_term=float(np.mean(gps)) if gps else gp_last,
                total_loss=float(m[2]),
                wall_time=time.perf_counter() - t0 if config.record_wall_time else 0.0,
            )
        )
        if on_epoch is not None:
            on_epoch(epoch, stack)
    result.steps = step
    return result


def _critic_update(stack, opt, views, ref, config: TrainConfig, step: int, iters: int) -> float:
    with T.no_grad():
        _, _, z = representations(stack, views[0], views[1], config.wasserstein_on)
    z = z.data
    n = len(views[0])
    gp = 0.0
    for k in range(iters):
        rng = substream(config.seed, f"penalty/step/{step}/{k}")
        loss, _, gp = critic_objective(stack, z, z[:n], ref, config.eta, rng)
        if not np.isfinite(loss.item()):
            raise DivergenceError(step, "critic objective is not finite")
        params = stack.group("critic")
        stack.update(adam_step(opt, params, T.backward(loss, params)))
    return gp


def train_critic(
    stack: EncoderStack,
    z_rep_sampler: Callable[[int], np.ndarray],
    reference: ReferenceSpec,
    steps: int,
    eta: float = 1.0,
    lr: float = 1e-3,
    seed: int = 0,
    betas: tuple[float, float] = (0.9, 0.999),
) -> EncoderStack:
    """Fit only the critic against a fixed representation distribution.

    ``z_rep_sampler(step)`` returns a batch of representations; the reference batch has the same size.
    """
    stack = stack.copy()
    opt = AdamState(LRSchedule("constant", lr), beta1=betas[0], beta2=betas[1])
    for step in range(steps):
        z = np.asarray(z_rep_sampler(step), dtype=np.float64)
        ref = sample_reference(reference, len(z), substream(seed, f"reference/step/{step}")).points
        loss, _, _ = critic_objective(stack, z, z, ref, eta, substream(seed, f"penalty/step/{step}"))
        params = stack.group("critic")
        stack.update(adam_step(opt, params, T.backward(loss, params)))
    return stack


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
