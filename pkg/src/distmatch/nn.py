"""Encoder, projection head and critic built on the tape ops.

Encoder: ReLU MLP ``[d, hidden..., d*]`` followed by projection onto the
sphere of radius R. Head: ``d* -> hidden -> d*`` with one ReLU, then the same
projection. Critic: ``[d*, 128, d*, 1]`` with layer norm and LeakyReLU(0.2)
after every hidden layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .rng import substream


class NetworkShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 2
    d_star: int = 4
    encoder_hidden: tuple[int, ...] = (64, 64)
    head_hidden: int = 64
    critic_hidden: tuple[int, ...] | None = None  # default (128, d*)
    radius: float = 1.0
    leaky_slope: float = 0.2
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        if self.critic_hidden is None:
            object.__setattr__(self, "critic_hidden", (128, self.d_star))
        else:
            object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))

    @property
    def encoder_widths(self) -> list[int]:
        return [self.input_dim, *self.encoder_hidden, self.d_star]

    @property
    def head_widths(self) -> list[int]:
        return [self.d_star, self.head_hidden, self.d_star]

    @property
    def critic_widths(self) -> list[int]:
        return [self.d_star, *self.critic_hidden, 1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    # He-uniform weights; biases uniform in +-1/sqrt(fan_in)
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-1.0, 1.0, size=(1, fan_out)) / np.sqrt(fan_in)
    return w, b


@dataclass
class EncoderStack:
    config: NetConfig
    params: dict[str, T.Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: NetConfig, seed: int) -> "EncoderStack":
        params: dict[str, np.ndarray] = {}
        for group, widths in (
            ("encoder", config.encoder_widths),
            ("head", config.head_widths),
            ("critic", config.critic_widths),
        ):
            rng = substream(seed, f"init/{group}")
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                params[f"{group}.w{i}"], params[f"{group}.b{i}"] = _init_linear(rng, a, b)
                if group == "critic" and i < len(widths) - 2:
                    params[f"critic.ln{i}.gain"] = np.ones((1, b))
                    params[f"critic.ln{i}.bias"] = np.zeros((1, b))
        return cls(config, {k: T.parameter(v, k) for k, v in params.items()})

    def group(self, prefix: str) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def update(self, new: dict[str, T.Tensor]) -> None:
        self.params.update(new)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "EncoderStack":
        return EncoderStack(self.config, {k: T.parameter(v.data, k) for k, v in self.params.items()})

    # --- checkpoints -------------------------------------------------------------

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        out = dict(self.arrays())
        c = self.config
        out["manifest/encoder_widths"] = np.array(c.encoder_widths, dtype=np.float64)
        out["manifest/head_widths"] = np.array(c.head_widths, dtype=np.float64)
        out["manifest/critic_widths"] = np.array(c.critic_widths, dtype=np.float64)
        out["manifest/radius"] = np.array([c.radius])
        return out

    @classmethod
    def from_checkpoint(cls, arrays: dict[str, np.ndarray], config: NetConfig) -> "EncoderStack":
        expected = cls.init(config, seed=0)
        for key, widths in (
            ("manifest/encoder_widths", config.encoder_widths),
            ("manifest/head_widths", config.head_widths),
            ("manifest/critic_widths", config.critic_widths),
        ):
            if key in arrays and [int(v) for v in arrays[key]] != list(widths):
                raise NetworkShapeError(f"{key}: checkpoint has {arrays[key].astype(int).tolist()}, config {widths}")
        if "manifest/radius" in arrays and float(arrays["manifest/radius"][0]) != config.radius:
            raise NetworkShapeError("manifest/radius: checkpoint radius differs from config")
        params = {}
        for name, ref in expected.params.items():
            if name not in arrays:
                raise NetworkShapeError(f"{name}: missing from checkpoint")
            if arrays[name].shape != ref.shape:
                raise NetworkShapeError(f"{name}: checkpoint shape {arrays[name].shape}, config {ref.shape}")
            params[name] = T.parameter(arrays[name], name)
        return cls(config, params)


def _mlp(x: T.Tensor, params: dict[str, T.Tensor], prefix: str, layers: int) -> T.Tensor:
    h = x
    for i in range(layers):
        h = T.affine(h, params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
        if i < layers - 1:
            h = T.relu(h)
    return h


def encode(stack: EncoderStack, x, with_head: bool = False) -> T.Tensor:
    """Representations on the sphere of radius R; ``with_head`` adds the projection head."""
    c = stack.config
    x = T.constant(x)
    if x.data.ndim != 2 or x.shape[1] != c.input_dim:
        raise NetworkShapeError(f"encode: expected (batch, {c.input_dim}) input, got {x.shape}")
    z = T.sphere_normalize(_mlp(x, stack.params, "encoder", len(c.encoder_widths) - 1), c.radius)
    return project(stack, z) if with_head else z


def project(stack: EncoderStack, z: T.Tensor) -> T.Tensor:
    """Projection head applied to encoder output, renormalized to the sphere."""
    return T.sphere_normalize(_mlp(z, stack.params, "head", 2), stack.config.radius)


def criticize(stack: EncoderStack, z, params: dict[str, T.Tensor] | None = None) -> T.Tensor:
    """Critic value per row, shape (batch, 1)."""
    c = stack.config
    p = stack.params if params is None else params
    z = T.constant(z)
    if z.data.ndim != 2 or z.shape[1] != c.d_star:
        raise NetworkShapeError(f"criticize: expected (batch, {c.d_star}) input, got {z.shape}")
    layers = len(c.critic_widths) - 1
    h = z
    for i in range(layers):
        h = T.affine(h, p[f"critic.w{i}"], p[f"critic.b{i}"])
        if i < layers - 1:
            h = T.layer_norm(h, p[f"critic.ln{i}.gain"], p[f"critic.ln{i}.bias"], c.layer_norm_eps)
            h = T.leaky_relu(h, c.leaky_slope)
    return h


def frozen(params: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    """Untracked copies, so a loss can use them without producing their gradients."""
    return {k: T.Tensor(v.data, name=k) for k, v in params.items()}


def encode_array(stack: EncoderStack, x: np.ndarray, with_head: bool = False) -> np.ndarray:
    with T.no_grad():
        return encode(stack, x, with_head).data


def lipschitz_probe(stack: EncoderStack, x: np.ndarray, rng: np.random.Generator, step: float = 1e-3) -> float:
    """Largest finite-difference ratio ||f(x + h u) - f(x)|| / h over the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    u = rng.standard_normal(x.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    f0 = encode_array(stack, x)
    f1 = encode_array(stack, x + step * u)
    return float(np.max(np.linalg.norm(f1 - f0, axis=1) / step))
