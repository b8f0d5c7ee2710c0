"""Dense float64 tensors with a define-by-run tape and reverse-mode gradients.

Every primitive's vector-Jacobian product is itself written with primitives,
so gradients can be recorded on the tape (``create_graph=True``) and
differentiated again. That is what the critic's gradient penalty needs.
Piecewise-linear activations contribute a constant mask to their backward
graph, so their second derivative is exactly zero.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class GradientError(RuntimeError):
    """Raised for invalid differentiation requests."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    prev = _recording()
    _state.record = False
    try:
        yield
    finally:
        _state.record = prev


class Tensor:
    """An immutable float64 array plus the tape node that produced it."""

    __slots__ = ("data", "parents", "vjp", "op", "requires_grad", "name", "twice")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.name = name
        self.twice = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item(): tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar for the handful of same-shape ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x, name: str) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _node(value: np.ndarray, op: str, parents: Sequence[Tensor], vjp, twice: bool = True) -> Tensor:
    # values produced by ops are fresh arrays, so skip the defensive copy in __init__
    out = Tensor.__new__(Tensor)
    value = np.asarray(value, dtype=np.float64)
    value.setflags(write=False)
    out.data = value
    out.op = op
    out.name = None
    out.parents = ()
    out.vjp = None
    out.requires_grad = False
    out.twice = True
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.twice = twice
    return out


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    return value


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _rank2(op: str, a: Tensor) -> None:
    if a.data.ndim != 2:
        raise ShapeError(f"{op}: expected a matrix, got shape {a.shape}")


# --- elementwise binary ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(_check_finite(a.data + b.data, "add"), "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(_check_finite(a.data - b.data, "sub"), "sub", (a, b), lambda g: (g, scale(g, -1.0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _node(_check_finite(a.data * b.data, "mul"), "mul", (a, b), lambda g: (mul(g, b), mul(g, a)))


# --- elementwise with constants ----------------------------------------------

def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(_check_finite(a.data * c, "scale"), "scale", (a,), lambda g: (scale(g, c),))


def add_const(a: Tensor, c) -> Tensor:
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), a.shape)
    return _node(_check_finite(a.data + c, "add_const"), "add_const", (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), a.shape)
    return _node(_check_finite(a.data * c, "mul_const"), "mul_const", (a,), lambda g: (mul_const(g, c),))


# --- activations ---------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, "relu", (a,), lambda g: (mul_const(g, mask),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * mask, "leaky_relu", (a,), lambda g: (mul_const(g, mask),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = (a.data > floor).astype(np.float64)
    value = np.maximum(a.data, floor)
    return _node(value, "clamp_min", (a,), lambda g: (mul_const(g, keep),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt: negative input")
    value = np.sqrt(a.data)

    def vjp(g):
        return (mul(g, scale(reciprocal(out), 0.5)),)

    out = _node(value, "sqrt", (a,), vjp)
    return out


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise FloatingPointError("reciprocal: division by zero")
    value = _check_finite(1.0 / a.data, "reciprocal")

    def vjp(g):
        return (mul(g, scale(mul(out, out), -1.0)),)

    out = _node(value, "reciprocal", (a,), vjp)
    return out


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# --- linear algebra and reductions --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _rank2("matmul", a)
    _rank2("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return _node(
        _check_finite(a.data @ b.data, "matmul"),
        "matmul",
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    _rank2("transpose", a)
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def sum_rows(a: Tensor) -> Tensor:
    """(n, d) -> (1, d)."""
    _rank2("sum_rows", a)
    n = a.shape[0]
    return _node(a.data.sum(axis=0, keepdims=True), "sum_rows", (a,), lambda g: (repeat_rows(g, n),))


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """(1, d) -> (n, d)."""
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"repeat_rows: expected shape (1, d), got {a.shape}")
    return _node(np.repeat(a.data, n, axis=0), "repeat_rows", (a,), lambda g: (sum_rows(g),))


def sum_cols(a: Tensor) -> Tensor:
    """(n, d) -> (n, 1)."""
    _rank2("sum_cols", a)
    d = a.shape[1]
    return _node(a.data.sum(axis=1, keepdims=True), "sum_cols", (a,), lambda g: (repeat_cols(g, d),))


def repeat_cols(a: Tensor, d: int) -> Tensor:
    """(n, 1) -> (n, d)."""
    if a.data.ndim != 2 or a.shape[1] != 1:
        raise ShapeError(f"repeat_cols: expected shape (n, 1), got {a.shape}")
    return _node(np.repeat(a.data, d, axis=1), "repeat_cols", (a,), lambda g: (sum_cols(g),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.data.sum()), "sum_all", (a,), lambda g: (fill(g, shape),))


def fill(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast a scalar tensor to ``shape``."""
    if a.size != 1:
        raise ShapeError(f"fill: expected a scalar, got shape {a.shape}")
    value = np.full(shape, a.data.reshape(()))
    return _node(value, "fill", (a,), lambda g: (reshape(sum_all(g), a.shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {shape}") from exc
    return _node(value, "reshape", (a,), lambda g: (reshape(g, src),))


def mean(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        _rank2("concat_rows", p)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(widths)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(slice_rows(g, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([p.data for p in parts], axis=0), "concat_rows", tuple(parts), vjp)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    _rank2("slice_rows", a)
    n, d = a.shape

    def vjp(g):
        pieces = []
        if lo > 0:
            pieces.append(Tensor(np.zeros((lo, d))))
        pieces.append(g)
        if hi < n:
            pieces.append(Tensor(np.zeros((n - hi, d))))
        return (concat_rows(pieces) if len(pieces) > 1 else g,)

    return _node(a.data[lo:hi].copy(), "slice_rows", (a,), vjp)


# --- composites -----------------------------------------------------------------

def add_row(a: Tensor, b: Tensor) -> Tensor:
    """Add a bias row ``b`` of shape (1, d) to every row of ``a``."""
    _rank2("add_row", a)
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"add_row: bias shape {b.shape} does not fit {a.shape}")
    return _node(_check_finite(a.data + b.data, "add_row"), "add_row", (a, b), lambda g: (g, sum_rows(g)))


def mul_row(a: Tensor, b: Tensor) -> Tensor:
    _rank2("mul_row", a)
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"mul_row: gain shape {b.shape} does not fit {a.shape}")
    return _node(
        _check_finite(a.data * b.data, "mul_row"),
        "mul_row",
        (a, b),
        lambda g: (mul_row(g, b), sum_rows(mul(g, a))),
    )


def mul_col(a: Tensor, c: Tensor) -> Tensor:
    _rank2("mul_col", a)
    if c.shape != (a.shape[0], 1):
        raise ShapeError(f"mul_col: column shape {c.shape} does not fit {a.shape}")
    return _node(
        _check_finite(a.data * c.data, "mul_col"),
        "mul_col",
        (a, c),
        lambda g: (mul_col(g, c), sum_cols(mul(g, a))),
    )


def sub_col(a: Tensor, c: Tensor) -> Tensor:
    """Subtract a per-row value ``c`` of shape (n, 1) from every column of ``a``."""
    _rank2("sub_col", a)
    if c.shape != (a.shape[0], 1):
        raise ShapeError(f"sub_col: column shape {c.shape} does not fit {a.shape}")
    return _node(_check_finite(a.data - c.data, "sub_col"), "sub_col", (a, c), lambda g: (g, scale(sum_cols(g), -1.0)))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with w of shape (d_in, d_out) and b of shape (1, d_out)."""
    _rank2("affine", x)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"affine[{w.name or 'weight'}]: input has {x.shape[1]} columns, weight expects {w.shape[0]}"
        )
    return add_row(matmul(x, w), b)


def row_sq_norm(a: Tensor) -> Tensor:
    return sum_cols(mul(a, a))


def row_norm(a: Tensor, floor: float = 0.0) -> Tensor:
    sq = row_sq_norm(a)
    if floor > 0:
        sq = clamp_min(sq, floor * floor)
    return sqrt(sq)


def sphere_normalize(a: Tensor, radius: float, floor: float = 1e-12) -> Tensor:
    """Rows mapped to R * x / max(||x||_2, floor)."""
    return scale(mul_col(a, reciprocal(row_norm(a, floor=floor))), radius)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _rank2("layer_norm", x)
    d = x.shape[1]
    mu = scale(sum_cols(x), 1.0 / d)
    centered = sub_col(x, mu)
    var = scale(row_sq_norm(centered), 1.0 / d)
    inv = reciprocal(sqrt(add_const(var, eps)))
    return add_row(mul_row(mul_col(centered, inv), gain), bias)


# --- first-order-only fused ops ----------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against 0-based integer labels."""
    _rank2("softmax_cross_entropy", logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError("softmax_cross_entropy: labels do not match logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    probs /= n

    def vjp(g):
        return (mul_const(fill(g, (n, k)), probs),)

    return _node(np.asarray(value), "softmax_cross_entropy", (logits,), vjp, twice=False)


def plan_cost(z: Tensor, targets: np.ndarray, plan: np.ndarray, kind: str = "l2") -> Tensor:
    """sum_ij plan[i, j] * ||z_i - targets_j|| with the plan and targets held fixed."""
    _rank2("plan_cost", z)
    targets = np.asarray(targets, dtype=np.float64)
    plan = np.asarray(plan, dtype=np.float64)
    if plan.shape != (z.shape[0], targets.shape[0]) or targets.shape[1] != z.shape[1]:
        raise ShapeError(f"plan_cost: plan {plan.shape} does not fit {z.shape} x {targets.shape}")
    diff = z.data[:, None, :] - targets[None, :, :]
    if kind == "l1":
        dist = np.abs(diff).sum(axis=2)
        unit = np.sign(diff)
    elif kind == "l2":
        dist = np.sqrt((diff * diff).sum(axis=2))
        unit = diff / np.maximum(dist, 1e-12)[:, :, None]
    else:
        raise ValueError(f"plan_cost: unknown cost kind {kind!r}")
    grad_z = np.einsum("ij,ijk->ik", plan, unit)
    value = float((plan * dist).sum())

    def vjp(g):
        return (mul_const(fill(g, z.shape), grad_z),)

    return _node(np.asarray(value), "plan_cost", (z,), vjp, twice=False)


# --- differentiation -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are tape nodes and can be
    differentiated again; every op on the path must then support it.
    """
    if grad_output is None:
        if output.size != 1:
            raise GradientError(f"grad: output of shape {output.shape} is not a scalar")
        grad_output = Tensor(np.ones(output.shape))
    order = _topo_order(output) if output.requires_grad else []
    keep = {id(w) for w in wrt}
    grads: dict[int, Tensor] = {id(output): grad_output}
    ctx = _nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            if create_graph and not node.twice:
                raise GradientError(f"grad: op {node.op!r} does not support create_graph")
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


@contextmanager
def _nullcontext():
    yield


def backward(output: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Plain first-order gradients of a scalar with respect to named parameters."""
    names = list(params)
    grads = grad(output, [params[n] for n in names])
    return {n: g.data for n, g in zip(names, grads)}


def input_gradient(output: Tensor, x: Tensor) -> Tensor:
    """Gradient of ``output`` (summed if it has several rows) with respect to ``x``.

    The result stays on the tape, so it can appear inside a loss that is later
    differentiated with respect to parameters.
    """
    if not x.requires_grad:
        raise GradientError("input_gradient: input is not being tracked")
    total = output if output.size == 1 else sum_all(output)
    return grad(total, [x], create_graph=True)[0]


def watch(x) -> Tensor:
    """A leaf tensor whose gradient will be tracked (for input gradients)."""
    data = x.data if isinstance(x, Tensor) else x
    return Tensor(data, requires_grad=True, name="input")


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        grad_flat[i] = (fp - fm) / (2 * h)
    return out


def iter_nodes(output: Tensor) -> Iterable[Tensor]:
    """Recorded nodes feeding ``output`` in topological order."""
    return iter(_topo_order(output))
