import numpy as np
import pytest

from distmatch import tensor as T
from distmatch.checkpoint import CheckpointError, decode, encode
from distmatch.optim import AdamState, LRSchedule, adam_step


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def test_identity_affine_forward():
    x = T.constant([[0.3, -0.7]])
    w = T.parameter(np.eye(2), "w")
    b = T.parameter(np.zeros((1, 2)), "b")
    np.testing.assert_array_equal(T.affine(x, w, b).data, [[0.3, -0.7]])


def test_relu_definition():
    np.testing.assert_array_equal(T.relu(T.constant([-1.0, 3.0])).data, [0.0, 3.0])


def test_two_layer_hand_value():
    # h = relu([1, -2] * 1 + [0.5, 0.25]) = [1.5, 0]; out = 1.5 * 2 + 0 * 3 - 1 = 2
    x = T.constant([[1.0]])
    h = T.relu(T.affine(x, T.parameter([[1.0, -2.0]], "w1"), T.parameter([[0.5, 0.25]], "b1")))
    out = T.affine(h, T.parameter([[2.0], [3.0]], "w2"), T.parameter([[-1.0]], "b2"))
    assert out.item() == 2.0


def test_square_gradient():
    w = T.parameter(3.0, "w")
    g = T.backward(T.mul(w, w), {"w": w})
    assert g["w"] == pytest.approx(6.0)


def test_constant_graph_zero_gradient():
    w = T.parameter(np.ones((2, 2)), "w")
    out = T.sum_all(T.constant(np.ones((2, 2))))
    g = T.backward(out, {"w": w})
    np.testing.assert_array_equal(g["w"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    w = T.parameter(np.ones((2, 2)), "w")
    with pytest.raises(T.GradientError):
        T.backward(T.scale(w, 2.0), {"w": w})


def test_shape_error_names_op():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
    with pytest.raises(T.ShapeError, match="affine\\[enc.w0\\]"):
        T.affine(T.constant(np.ones((1, 3))), T.parameter(np.ones((2, 2)), "enc.w0"), T.parameter(np.ones((1, 2)), "b"))


# --- gradient checks against central finite differences -------------------------

def _kink_free(pre_acts, margin=1e-3):
    return all(np.min(np.abs(p)) >= margin for p in pre_acts)


def _check_param_grads(build, shapes, rng):
    """build(params dict of np arrays) -> (scalar Tensor, list of pre-activation arrays)."""
    for _ in range(200):
        values = {k: rng.normal(size=s) for k, s in shapes.items()}
        params = {k: T.parameter(v, k) for k, v in values.items()}
        out, pre = build(params)
        if _kink_free(pre):
            break
    else:
        pytest.fail("could not draw a kink-free configuration")
    analytic = T.backward(out, params)
    for k in shapes:
        def f(arr, k=k):
            vals = dict(values)
            vals[k] = arr
            with T.no_grad():
                return build({n: T.Tensor(v) for n, v in vals.items()})[0].item()

        numeric = T.numeric_gradient(f, values[k])
        assert _rel_err(analytic[k], numeric) <= 1e-5, k


LAYER_KINDS = {
    "affine": lambda p: (T.sum_all(T.affine(p["x"], p["w"], p["b"])), []),
    "relu": lambda p: _act(p, T.relu),
    "leaky_relu": lambda p: _act(p, lambda a: T.leaky_relu(a, 0.2)),
    "layer_norm": lambda p: (
        T.sum_all(T.mul(T.layer_norm(p["x"], p["gain"], p["bias"]), T.constant(np.arange(12.0).reshape(4, 3)))),
        [],
    ),
    "sphere_normalize": lambda p: (
        T.sum_all(T.mul(T.sphere_normalize(p["x"], 1.5), T.constant(np.linspace(-1, 1, 12).reshape(4, 3)))),
        [],
    ),
    "softmax_cross_entropy": lambda p: (T.softmax_cross_entropy(p["x"], np.array([0, 2, 1, 2])), []),
    "plan_cost_l2": lambda p: (
        T.plan_cost(p["x"], np.linspace(-2, 2, 9).reshape(3, 3), np.full((4, 3), 1 / 12)),
        [],
    ),
    "concat_slice": lambda p: (
        T.sum_all(T.mul(T.slice_rows(T.concat_rows([p["x"], p["gain"]]), 1, 4), T.constant(np.ones((3, 3)) * 2))),
        [],
    ),
}


def _act(p, fn):
    pre = T.affine(p["x"], p["w"], p["b"])
    return T.sum_all(T.mul(fn(pre), T.constant(np.linspace(0.5, 2, 8).reshape(4, 2)))), [pre.data]


SHAPES = {
    "affine": {"x": (4, 3), "w": (3, 2), "b": (1, 2)},
    "relu": {"x": (4, 3), "w": (3, 2), "b": (1, 2)},
    "leaky_relu": {"x": (4, 3), "w": (3, 2), "b": (1, 2)},
    "layer_norm": {"x": (4, 3), "gain": (1, 3), "bias": (1, 3)},
    "sphere_normalize": {"x": (4, 3)},
    "softmax_cross_entropy": {"x": (4, 3)},
    "plan_cost_l2": {"x": (4, 3)},
    "concat_slice": {"x": (4, 3), "gain": (1, 3)},
}


@pytest.mark.parametrize("kind", sorted(LAYER_KINDS))
@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(kind, seed):
    _check_param_grads(LAYER_KINDS[kind], SHAPES[kind], np.random.default_rng(seed))


def test_input_gradient_linear():
    w = np.array([[0.5], [-2.0], [1.0]])
    x = T.watch(np.array([[0.1, 0.2, 0.3]]))
    g = T.input_gradient(T.matmul(x, T.constant(w)), x)
    np.testing.assert_allclose(g.data, w.T)


def test_input_gradient_relu_active():
    w = np.array([[1.0], [2.0]])
    x = T.watch(np.array([[1.0, 1.0]]))
    g = T.input_gradient(T.relu(T.matmul(x, T.constant(w))), x)
    np.testing.assert_allclose(g.data, w.T)


def _leaky_critic(x, p):
    h = x
    pre = []
    for i in range(2):
        a = T.affine(h, p[f"w{i}"], p[f"b{i}"])
        pre.append(a.data)
        h = T.leaky_relu(a, 0.2)
    return T.affine(h, p["w2"], p["b2"]), pre


@pytest.mark.parametrize("seed", range(20))
def test_input_gradient_three_layer_critic(seed):
    rng = np.random.default_rng(seed)
    dims = [3, 5, 4, 1]
    while True:
        p = {}
        for i in range(3):
            p[f"w{i}"] = T.Tensor(rng.normal(size=(dims[i], dims[i + 1])))
            p[f"b{i}"] = T.Tensor(rng.normal(size=(1, dims[i + 1])))
        x0 = rng.normal(size=(1, 3))
        out, pre = _leaky_critic(T.watch(x0), p)
        if _kink_free(pre):
            break
    x = T.watch(x0)
    analytic = T.input_gradient(_leaky_critic(x, p)[0], x).data

    def f(arr):
        with T.no_grad():
            return _leaky_critic(T.Tensor(arr), p)[0].item()

    assert _rel_err(analytic, T.numeric_gradient(f, x0)) <= 1e-5


def _penalty(x0, params, critic):
    x = T.watch(x0)
    g = T.input_gradient(critic(x, params), x)
    return T.mean(T.square(T.add_const(T.row_norm(g), -1.0)))


def test_penalty_double_backward_linear_critic_fd_of_fd():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(3, 4))
    w0 = rng.normal(size=(4, 1))
    b0 = rng.normal(size=(1, 1))

    def critic(x, p):
        return T.affine(x, p["w"], p["b"])

    params = {"w": T.parameter(w0, "w"), "b": T.parameter(b0, "b")}
    analytic = T.backward(_penalty(x0, params, critic), params)

    def penalty_fd(w):
        # inner gradient by finite differences in x, outer by finite differences in w
        def g_at(row):
            return T.numeric_gradient(lambda z: float((z @ w)[0] + b0[0, 0]), row, h=1e-4)

        norms = np.array([np.linalg.norm(g_at(r.copy())) for r in x0])
        return float(np.mean((norms - 1.0) ** 2))

    numeric = T.numeric_gradient(penalty_fd, w0, h=1e-4)
    assert _rel_err(analytic["w"], numeric) <= 1e-4
    np.testing.assert_allclose(analytic["b"], 0.0, atol=1e-12)


def test_penalty_double_backward_layer_norm_critic():
    """Parameter gradient of the penalty versus finite differences of the tape value."""
    rng = np.random.default_rng(3)
    dims = [3, 6, 3, 1]
    vals = {}
    for i in range(3):
        vals[f"w{i}"] = rng.normal(size=(dims[i], dims[i + 1]))
        vals[f"b{i}"] = rng.normal(size=(1, dims[i + 1]))
    for i in range(2):
        vals[f"g{i}"] = 1.0 + 0.1 * rng.normal(size=(1, dims[i + 1]))
        vals[f"c{i}"] = 0.1 * rng.normal(size=(1, dims[i + 1]))
    x0 = rng.normal(size=(4, 3))

    def critic(x, p):
        h = x
        for i in range(2):
            h = T.leaky_relu(T.layer_norm(T.affine(h, p[f"w{i}"], p[f"b{i}"]), p[f"g{i}"], p[f"c{i}"]), 0.2)
        return T.affine(h, p["w2"], p["b2"])

    params = {k: T.parameter(v, k) for k, v in vals.items()}
    analytic = T.backward(_penalty(x0, params, critic), params)
    for k in ("w0", "g1", "w2"):
        def f(arr, k=k):
            p = {n: T.Tensor(v) for n, v in vals.items()}
            p[k] = T.Tensor(arr)
            return _penalty(x0, p, critic).item()

        assert _rel_err(analytic[k], T.numeric_gradient(f, vals[k])) <= 1e-5, k


def test_input_gradient_rejects_first_order_only_ops():
    x = T.watch(np.ones((2, 3)))
    with pytest.raises(T.GradientError):
        T.input_gradient(T.softmax_cross_entropy(x, np.array([0, 1])), x)


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        p = {"w": T.parameter(rng.normal(size=(3, 2)), "w"), "b": T.parameter(rng.normal(size=(1, 2)), "b")}
        out = T.sum_all(T.leaky_relu(T.affine(T.constant(rng.normal(size=(5, 3))), p["w"], p["b"])))
        return out.data.tobytes(), {k: v.tobytes() for k, v in T.backward(out, p).items()}

    assert run() == run()


# --- Adam ---------------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    p = {"w": T.parameter(np.array([1.0, -2.0]), "w")}
    state = AdamState(LRSchedule("constant", 0.1))
    new = adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(new["w"].data, p["w"].data)
    assert state.step == 1


def test_adam_first_step_hand_value():
    # m_hat = 2, v_hat = 4 -> update = 0.1 * 2 / (2 + 1e-8)
    p = {"w": T.parameter(np.array(1.0), "w")}
    state = AdamState(LRSchedule("constant", 0.1), beta1=0.9, beta2=0.999)
    new = adam_step(state, p, {"w": np.array(2.0)})
    assert new["w"].item() == pytest.approx(0.9, abs=1e-8)


def test_adam_rejects_nan_gradient():
    p = {"enc.w0": T.parameter(np.ones(2), "enc.w0")}
    with pytest.raises(FloatingPointError, match="enc.w0"):
        adam_step(AdamState(LRSchedule()), p, {"enc.w0": np.array([np.nan, 0.0])})


def test_warmup_and_decay_schedules():
    warm = LRSchedule("warmup", base=3e-5, warmup_steps=500)
    assert warm(0) == pytest.approx(3e-5 / 500)
    assert warm(499) == pytest.approx(3e-5)
    assert warm(10_000) == 3e-5
    decay = LRSchedule("exp_decay", base=1e-2, end=1e-6, total_steps=101)
    assert decay(0) == pytest.approx(1e-2)
    assert decay(50) == pytest.approx(1e-4)
    assert decay(100) == pytest.approx(1e-6)


# --- checkpoint format -----------------------------------------------------------------

def test_checkpoint_bytes_exact():
    blob = encode({"w": np.array([[1.0, 2.0]])})
    expected = (
        b"DMCK" + (1).to_bytes(4, "little") + (1).to_bytes(2, "little") + b"w" + bytes([2])
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.0, 2.0], dtype="<f8").tobytes()
    )
    assert blob == expected


def test_checkpoint_roundtrip_and_truncation():
    params = {"enc.w0": np.arange(6.0).reshape(2, 3), "radius": np.array(1.0), "ünï": np.ones(4)}
    out = decode(encode(params))
    assert list(out) == list(params)
    for k in params:
        np.testing.assert_array_equal(out[k], params[k])
    with pytest.raises(CheckpointError):
        decode(encode(params)[:-3])
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + bytes(8))
