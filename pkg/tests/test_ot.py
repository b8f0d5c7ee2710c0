import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distmatch.ot import (
    DiscreteMeasure,
    OTError,
    SinkhornError,
    assign_labels,
    class_mass_matrix,
    dual_estimate,
    ground_cost,
    linear_assignment,
    mallows_exact,
    sinkhorn,
)
from oracles import best_permutation, ot_by_permutations, ot_by_vertices


def _random_measure(rng, n, d=2, uniform=False):
    pts = rng.random((n, d))
    if uniform:
        return DiscreteMeasure.uniform(pts)
    w = rng.random(n) + 0.05
    return DiscreteMeasure(pts, w / w.sum())


def test_ground_cost_examples():
    assert ground_cost([[0.0, 0.0]], [[0.0, 0.0]]).tolist() == [[0.0]]
    assert ground_cost([[0.0, 0.0]], [[1.0, 1.0]], "l1")[0, 0] == 2.0
    assert ground_cost([[0.0, 0.0]], [[3.0, 4.0]], "l2")[0, 0] == 5.0
    pts = np.random.default_rng(0).random((5, 3))
    C = ground_cost(pts, pts)
    np.testing.assert_array_equal(C, C.T)
    with pytest.raises(OTError):
        ground_cost(np.ones((2, 3)), np.ones((2, 2)))


def test_identical_measures_zero_distance():
    mu = _random_measure(np.random.default_rng(1), 7)
    d, c = mallows_exact(mu, mu, "l1")
    assert d == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(np.diag(c.plan), mu.weights, atol=1e-12)


def test_two_diracs():
    x, y = np.array([[0.2, -1.0, 3.0]]), np.array([[1.0, 1.0, 1.0]])
    d, _ = mallows_exact(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y), "l1")
    assert d == pytest.approx(np.abs(x - y).sum())


def test_one_dimensional_hand_case():
    # assignments {0->0, 1->2}: (0 + 1) / 2; {0->2, 1->0}: (2 + 1) / 2
    mu = DiscreteMeasure.uniform([[0.0], [1.0]])
    nu = DiscreteMeasure.uniform([[0.0], [2.0]])
    for method in ("simplex", "assignment", "auto"):
        assert mallows_exact(mu, nu, "l1", method=method)[0] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(30))
def test_exact_matches_permutation_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    mu, nu = _random_measure(rng, n, uniform=True), _random_measure(rng, n, uniform=True)
    truth = ot_by_permutations(ground_cost(mu.points, nu.points, "l1"))
    for method in ("simplex", "assignment"):
        assert mallows_exact(mu, nu, "l1", method=method)[0] == pytest.approx(truth, abs=1e-9)


@pytest.mark.parametrize("seed", range(15))
def test_exact_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    n1, n2 = (int(v) for v in rng.integers(1, 5, size=2))
    mu, nu = _random_measure(rng, n1), _random_measure(rng, n2)
    C = ground_cost(mu.points, nu.points, "l2")
    d, c = mallows_exact(mu, nu, "l2")
    assert d == pytest.approx(ot_by_vertices(C, mu.weights, nu.weights), abs=1e-9)
    np.testing.assert_allclose(c.plan.sum(axis=1), mu.weights, atol=1e-9)
    np.testing.assert_allclose(c.plan.sum(axis=0), nu.weights, atol=1e-9)
    assert c.cost == pytest.approx((c.plan * C).sum(), abs=1e-9)


def test_zero_weight_atoms_are_ignored():
    rng = np.random.default_rng(5)
    mu = DiscreteMeasure(rng.random((4, 2)), [0.5, 0.0, 0.25, 0.25])
    nu = _random_measure(rng, 3)
    trimmed = DiscreteMeasure(mu.points[[0, 2, 3]], [0.5, 0.25, 0.25])
    assert mallows_exact(mu, nu)[0] == pytest.approx(mallows_exact(trimmed, nu)[0], abs=1e-12)
    assert mallows_exact(mu, nu)[1].plan[1].sum() == 0.0


def test_exact_budget_error_mentions_sinkhorn():
    big = DiscreteMeasure.uniform(np.zeros((1001, 1)))
    with pytest.raises(OTError, match="sinkhorn"):
        mallows_exact(big, big)


def test_assignment_route_rejects_unequal_sizes():
    rng = np.random.default_rng(0)
    with pytest.raises(OTError):
        mallows_exact(_random_measure(rng, 3, uniform=True), _random_measure(rng, 4, uniform=True), method="assignment")


def test_linear_assignment_rectangular():
    C = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]])
    col = linear_assignment(C)
    assert C[[0, 1], col].sum() == 3.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7), st.sampled_from(["l1", "l2"]))
def test_metric_axioms(seed, n, kind):
    rng = np.random.default_rng(seed)
    mu, nu, rho = (_random_measure(rng, int(rng.integers(1, n + 1))) for _ in range(3))
    d_mn = mallows_exact(mu, nu, kind)[0]
    assert abs(d_mn - mallows_exact(nu, mu, kind)[0]) <= 1e-9
    assert mallows_exact(mu, rho, kind)[0] <= d_mn + mallows_exact(nu, rho, kind)[0] + 1e-9


# --- sinkhorn --------------------------------------------------------------------

def test_sinkhorn_identical_measures_small_cost():
    rng = np.random.default_rng(2)
    n = 20
    mu = _random_measure(rng, n, uniform=True)
    d, c = sinkhorn(mu, mu, reg=1e-2)
    assert d <= 1e-2 * np.log(n)
    np.testing.assert_allclose(c.plan.sum(axis=1), mu.weights, atol=1e-9)
    np.testing.assert_allclose(c.plan.sum(axis=0), mu.weights, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_sinkhorn_close_to_exact(seed):
    rng = np.random.default_rng(seed)
    mu, nu = _random_measure(rng, 20, uniform=True), _random_measure(rng, 20, uniform=True)
    exact = mallows_exact(mu, nu)[0]
    assert abs(sinkhorn(mu, nu, reg=1e-3, tol=1e-5)[0] - exact) <= 0.05 * exact


def test_sinkhorn_reg_sweep_approaches_exact():
    rng = np.random.default_rng(9)
    mu, nu = _random_measure(rng, 20), _random_measure(rng, 20)
    exact = mallows_exact(mu, nu)[0]
    gaps = [sinkhorn(mu, nu, reg=r, tol=1e-6)[0] - exact for r in (1e-1, 3e-2, 1e-2, 3e-3, 1e-3)]
    assert all(g >= -1e-9 for g in gaps)
    assert all(later <= earlier + 1e-9 for earlier, later in zip(gaps, gaps[1:]))


def test_sinkhorn_nonconvergence_reports_violation():
    rng = np.random.default_rng(4)
    mu, nu = _random_measure(rng, 10), _random_measure(rng, 10)
    with pytest.raises(SinkhornError) as info:
        sinkhorn(mu, nu, reg=1e-4, max_iters=3, tol=1e-14)
    assert info.value.violation > 0


def test_sinkhorn_rejects_nonpositive_reg():
    mu = DiscreteMeasure.uniform([[0.0]])
    with pytest.raises(OTError):
        sinkhorn(mu, mu, reg=0.0)


# --- dual estimate ----------------------------------------------------------------------

def test_dual_estimate_examples():
    assert dual_estimate(np.zeros(5), np.zeros((4, 2))) == 0.0
    assert dual_estimate(np.full(5, 3.2), np.full((4, 2), 3.2)) == pytest.approx(0.0)
    # g(x) = x in 1D: reference mean 1, representation mean 0
    assert dual_estimate([0.5, 1.5], [[-1.0, 1.0], [0.5, -0.5]]) == pytest.approx(1.0)
    with pytest.raises(OTError):
        dual_estimate([], [1.0])


def test_weak_duality_for_lipschitz_probe():
    rng = np.random.default_rng(0)
    x, y = rng.random((30, 2)), rng.random((30, 2)) + 0.3
    w = rng.normal(size=2)
    b = rng.normal()

    def g(z):
        return np.tanh(z @ w + b) + 0.5 * np.sin(z[:, 0])

    grid = np.stack(np.meshgrid(np.linspace(-0.1, 1.5, 120), np.linspace(-0.1, 1.5, 120)), -1).reshape(-1, 2)
    h = 1e-6
    grads = np.stack([(g(grid + h * e) - g(grid - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    lip = np.linalg.norm(grads, axis=1).max()
    est = dual_estimate(g(y), g(x))
    exact = mallows_exact(DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(y))[0]
    assert abs(est) / lip <= exact + 1e-6


# --- label assignment ----------------------------------------------------------------------

def test_assign_labels_worked_example():
    Q = np.array([[1 / 5, 0, 2 / 15], [1 / 15, 1 / 30, 7 / 30], [4 / 15, 1 / 30, 1 / 30]])
    np.testing.assert_array_equal(assign_labels(Q), [2, 3, 1])


def test_assign_labels_diagonal_dominant():
    M = np.eye(5) * 3 + np.random.default_rng(0).random((5, 5))
    np.testing.assert_array_equal(assign_labels(M), np.arange(1, 6))


@pytest.mark.parametrize("seed", range(100))
def test_assign_labels_matches_brute_force(seed):
    M = np.random.default_rng(seed).random((5, 5))
    best, _ = best_permutation(M)
    tau = assign_labels(M)
    assert M[np.arange(5), tau - 1].sum() == pytest.approx(best, abs=1e-12)


def test_assign_labels_rejects_non_square():
    with pytest.raises(OTError):
        assign_labels(np.ones((2, 3)))


def test_class_mass_matrix_examples():
    n = 4
    M = class_mass_matrix(np.eye(n) / n, [1, 2, 3, 4], [1, 2, 3, 4])
    np.testing.assert_allclose(M, np.eye(4) / 4)
    single = class_mass_matrix(np.full((3, 2), 1 / 6), [2, 2, 2], [1, 2], n_classes=2)
    np.testing.assert_allclose(single, [[0, 0], [0.5, 0.5]])
    # hand plan: rows labelled (1, 1, 2), reference parts (1, 2) mapped to classes (2, 1)
    plan = np.array([[0.1, 0.2], [0.3, 0.0], [0.15, 0.25]])
    M = class_mass_matrix(plan, [1, 1, 2], [1, 2], part_to_class={1: 2, 2: 1})
    np.testing.assert_allclose(M, [[0.2, 0.4], [0.25, 0.15]])
    assert M.sum() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(OTError):
        class_mass_matrix(plan, [1, 1, 3], [1, 2], n_classes=2)
