"""Mallows' (Wasserstein-1) distance between discrete measures.

Exact values come from a transportation (network) simplex on the dense
bipartite graph, with an assignment fast path for uniform equal-size measures.
A log-domain Sinkhorn solver gives the entropic approximation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

EXACT_BUDGET = 1_000_000


class OTError(ValueError):
    pass


class SinkhornError(RuntimeError):
    def __init__(self, message: str, violation: float):
        super().__init__(message)
        self.violation = violation


class CostKind(str, Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if pts.shape[0] < 1 or w.shape[0] != pts.shape[0]:
            raise OTError("measure needs n >= 1 points and one weight per point")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise OTError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Coupling:
    plan: np.ndarray
    cost: float


def ground_cost(a: np.ndarray, b: np.ndarray, kind: CostKind | str = CostKind.L2) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise OTError(f"ground_cost: dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    if CostKind(kind) is CostKind.L1:
        return np.abs(diff).sum(axis=2)
    return np.sqrt((diff * diff).sum(axis=2))


# --- assignment -------------------------------------------------------------------

def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Returns ``col`` with ``col[i]`` the column given to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise OTError("linear_assignment: more rows than columns")
    rows, cols = linear_sum_assignment(cost)
    col = np.empty(n, dtype=np.int64)
    col[rows] = cols
    return col


def assign_labels(mass: np.ndarray) -> np.ndarray:
    """Permutation maximizing total transported mass; ``tau[k-1]`` is the 1-based part for class k."""
    mass = np.asarray(mass, dtype=np.float64)
    if mass.ndim != 2 or mass.shape[0] != mass.shape[1]:
        raise OTError("assign_labels: mass matrix must be square")
    if np.any(mass < 0):
        raise OTError("assign_labels: mass must be nonnegative")
    return linear_assignment(-mass) + 1


# --- transportation simplex -------------------------------------------------------------

def _northwest_corner(a: np.ndarray, b: np.ndarray):
    n1, n2 = len(a), len(b)
    flow = np.zeros((n1, n2))
    basis: list[tuple[int, int]] = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while True:
        q = max(min(ra[i], rb[j]), 0.0)
        flow[i, j] = q
        basis.append((i, j))
        ra[i] -= q
        rb[j] -= q
        if i == n1 - 1 and j == n2 - 1:
            break
        if i == n1 - 1:
            j += 1
        elif j == n2 - 1:
            i += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return flow, basis


def _transport_simplex(a: np.ndarray, b: np.ndarray, C: np.ndarray, max_pivots: int | None = None) -> np.ndarray:
    n1, n2 = C.shape
    flow, basis = _northwest_corner(a, b)
    nodes = n1 + n2
    adj: list[set[int]] = [set() for _ in range(nodes)]
    is_basic = np.zeros((n1, n2), dtype=bool)
    for i, j in basis:
        adj[i].add(n1 + j)
        adj[n1 + j].add(i)
        is_basic[i, j] = True
    tol = 1e-12 * (1.0 + float(np.abs(C).max()))
    max_pivots = max_pivots or 50 * nodes * nodes + 1000
    parent = np.full(nodes, -1, dtype=np.int64)
    depth = np.zeros(nodes, dtype=np.int64)
    pot = np.zeros(nodes)

    def edge_cost(x: int, y: int) -> float:
        return C[x, y - n1] if x < n1 else C[y, x - n1]

    def hang(start: int, above: int) -> None:
        # re-root the subtree containing ``start`` below node ``above``
        parent[start] = above
        depth[start] = depth[above] + 1 if above >= 0 else 0
        pot[start] = edge_cost(start, above) - pot[above] if above >= 0 else 0.0
        stack = [start]
        while stack:
            x = stack.pop()
            for y in adj[x]:
                if y != parent[x]:
                    parent[y] = x
                    depth[y] = depth[x] + 1
                    pot[y] = edge_cost(x, y) - pot[x]
                    stack.append(y)

    hang(0, -1)
    degenerate_run = 0
    for _ in range(max_pivots):
        reduced = C - pot[:n1, None] - pot[None, n1:]
        reduced[is_basic] = 0.0
        if degenerate_run > 2 * nodes:
            # long degenerate stretch: fall back to the first eligible cell
            cand = np.flatnonzero(reduced.ravel() < -tol)
            if cand.size == 0:
                return flow
            ie, je = divmod(int(cand[0]), n2)
        else:
            ie, je = divmod(int(np.argmin(reduced)), n2)
            if reduced[ie, je] >= -tol:
                return flow
        # tree path from row ie to column je
        x, y = ie, n1 + je
        left, right = [x], [y]
        while depth[x] > depth[y]:
            x = parent[x]
            left.append(x)
        while depth[y] > depth[x]:
            y = parent[y]
            right.append(y)
        while x != y:
            x = parent[x]
            y = parent[y]
            left.append(x)
            right.append(y)
        path = left + right[-2::-1]
        edges = list(zip(path[:-1], path[1:]))
        cells = [(s, t - n1) if s < n1 else (t, s - n1) for s, t in edges]
        minus = cells[0::2]
        plus = cells[1::2]
        leave = min(range(len(minus)), key=lambda q: (flow[minus[q]], q))
        theta = flow[minus[leave]]
        degenerate_run = degenerate_run + 1 if theta <= 0 else 0
        for c in minus:
            flow[c] -= theta
        for c in plus:
            flow[c] += theta
        flow[ie, je] = theta
        li, lj = minus[leave]
        flow[li, lj] = 0.0
        is_basic[li, lj] = False
        is_basic[ie, je] = True
        # the child end of the leaving edge heads the detached subtree
        s, t = edges[2 * leave]
        child = s if parent[s] == t else t
        adj[li].discard(n1 + lj)
        adj[n1 + lj].discard(li)
        adj[ie].add(n1 + je)
        adj[n1 + je].add(ie)
        # whichever entering endpoint lies under ``child`` gets re-hung on the other
        z = ie
        while z != -1 and z != child:
            z = parent[z]
        if z == child:
            hang(ie, n1 + je)
        else:
            hang(n1 + je, ie)
    raise OTError("transport simplex did not terminate within the pivot budget")


def _is_uniform_square(mu: DiscreteMeasure, nu: DiscreteMeasure) -> bool:
    n = len(mu)
    return (
        n == len(nu)
        and np.allclose(mu.weights, 1.0 / n, rtol=0, atol=1e-15)
        and np.allclose(nu.weights, 1.0 / n, rtol=0, atol=1e-15)
    )


def mallows_exact(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    kind: CostKind | str = CostKind.L2,
    method: str = "auto",
) -> tuple[float, Coupling]:
    """Exact Mallows' distance and an optimal coupling.

    ``method`` is ``simplex``, ``assignment`` (uniform equal-size only) or
    ``auto``, which takes the assignment route whenever it applies.
    """
    if len(mu) * len(nu) > EXACT_BUDGET:
        raise OTError(
            f"exact OT on {len(mu)} x {len(nu)} atoms exceeds the budget of {EXACT_BUDGET}; use sinkhorn"
        )
    C = ground_cost(mu.points, nu.points, kind)
    uniform = _is_uniform_square(mu, nu)
    if method == "assignment" and not uniform:
        raise OTError("assignment route needs uniform measures of equal size")
    if method == "assignment" or (method == "auto" and uniform):
        n = len(mu)
        col = linear_assignment(C)
        plan = np.zeros_like(C)
        plan[np.arange(n), col] = 1.0 / n
    elif method in ("simplex", "auto"):
        rows = np.flatnonzero(mu.weights > 0)
        cols = np.flatnonzero(nu.weights > 0)
        sub = _transport_simplex(mu.weights[rows], nu.weights[cols], C[np.ix_(rows, cols)])
        plan = np.zeros_like(C)
        plan[np.ix_(rows, cols)] = np.maximum(sub, 0.0)
    else:
        raise OTError(f"unknown exact method {method!r}")
    cost = float((plan * C).sum())
    return cost, Coupling(plan=plan, cost=cost)


# --- entropic approximation -----------------------------------------------------------------

def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    # scipy.special.logsumexp is ~9x slower on small matrices; this runs in the inner loop
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)


def _round_to_feasible(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    r = P.sum(axis=1)
    P = P * np.minimum(1.0, a / np.maximum(r, 1e-300))[:, None]
    c = P.sum(axis=0)
    P = P * np.minimum(1.0, b / np.maximum(c, 1e-300))[None, :]
    ea = a - P.sum(axis=1)
    eb = b - P.sum(axis=0)
    total = ea.sum()
    if total > 0:
        P = P + np.outer(ea, eb) / total
    return P


def sinkhorn(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    kind: CostKind | str = CostKind.L2,
    reg: float = 1e-2,
    max_iters: int = 100_000,
    tol: float = 1e-6,
) -> tuple[float, Coupling]:
    """Log-domain Sinkhorn; the returned distance is <plan, C> of the rounded plan."""
    if not reg > 0:
        raise OTError("reg must be positive")
    a, b = mu.weights, nu.weights
    C = ground_cost(mu.points, nu.points, kind)
    la = np.log(np.where(a > 0, a, 1.0))
    lb = np.log(np.where(b > 0, b, 1.0))
    la[a == 0] = -np.inf
    lb[b == 0] = -np.inf
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    # warm start through a geometric sequence of larger regularizations
    scale = max(float(C.max()), reg)
    steps = [s for s in np.geomspace(scale, reg, num=max(2, int(np.ceil(np.log10(scale / reg))) + 2))]
    violation = np.inf
    used = 0
    for eps in steps:
        final = eps == steps[-1]
        budget = max_iters - used if final else min(200, max_iters - used)
        for it in range(budget):
            f = eps * la - eps * _logsumexp((g[None, :] - C) / eps, axis=1)
            g = eps * lb - eps * _logsumexp((f[:, None] - C) / eps, axis=0)
            used += 1
            if final and (it % 10 == 0 or it == budget - 1):
                logP = (f[:, None] + g[None, :] - C) / eps
                violation = float(np.abs(np.exp(_logsumexp(logP, axis=1)) - a).sum())
                if violation <= tol:
                    break
        if final and violation <= tol:
            break
    if violation > tol:
        raise SinkhornError(f"sinkhorn did not converge in {max_iters} iterations", violation)
    P = np.exp((f[:, None] + g[None, :] - C) / reg)
    P = _round_to_feasible(P, a, b)
    cost = float((P * C).sum())
    return cost, Coupling(plan=P, cost=cost)


# --- critic-based estimate and label bookkeeping ----------------------------------------------

def dual_estimate(critic_on_reference, critic_on_representations) -> float:
    """Mean critic value on reference draws minus the mean over representation views.

    ``critic_on_representations`` may be flat or shaped (n, 2) for the two views;
    either way every view gets equal weight.
    """
    ref = np.asarray(critic_on_reference, dtype=np.float64).reshape(-1)
    rep = np.asarray(critic_on_representations, dtype=np.float64).reshape(-1)
    if ref.size == 0 or rep.size == 0:
        raise OTError("dual_estimate: empty input")
    return float(ref.mean() - rep.mean())


def class_mass_matrix(
    plan: np.ndarray,
    source_labels,
    reference_part_ids,
    part_to_class=None,
    n_classes: int | None = None,
) -> np.ndarray:
    """Entry (i, j): plan mass moved from source class i+1 to reference class j+1."""
    plan = np.asarray(plan, dtype=np.float64)
    src = np.asarray(source_labels, dtype=np.int64)
    parts = np.asarray(reference_part_ids, dtype=np.int64)
    if plan.shape != (src.size, parts.size):
        raise OTError(f"class_mass_matrix: plan {plan.shape} vs labels ({src.size}, {parts.size})")
    if part_to_class is None:
        ref = parts
    else:
        mapping = part_to_class if isinstance(part_to_class, dict) else dict(enumerate(part_to_class, start=1))
        ref = np.array([mapping[int(p)] for p in parts], dtype=np.int64)
    K = n_classes or int(max(src.max(initial=1), ref.max(initial=1)))
    if src.min(initial=1) < 1 or src.max(initial=1) > K or ref.min(initial=1) < 1 or ref.max(initial=1) > K:
        raise OTError(f"class_mass_matrix: labels outside [1, {K}]")
    rows = np.zeros((K, plan.shape[1]))
    np.add.at(rows, src - 1, plan)
    out = np.zeros((K, K))
    np.add.at(out.T, ref - 1, rows.T)
    return out


# --- CSV helpers for the command line ------------------------------------------------------------

def read_measure_csv(path: str | Path) -> DiscreteMeasure:
    """Rows of coordinates; a column headed ``weight`` (if present) gives the masses."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        header, rows = [h.strip() for h in rows[0]], rows[1:]
    data = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    if header and "weight" in header:
        wi = header.index("weight")
        weights = data[:, wi]
        points = np.delete(data, wi, axis=1)
        weights = weights / weights.sum()
        return DiscreteMeasure(points, weights)
    return DiscreteMeasure.uniform(data)


def write_plan_csv(path: str | Path, plan: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "mass"])
        for i, j in zip(*np.nonzero(plan > 0)):
            w.writerow([int(i), int(j), repr(float(plan[i, j]))])
