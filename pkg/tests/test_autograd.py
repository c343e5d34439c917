import numpy as np
import pytest
from hypothesis import given, strategies as st

from robustvit import autograd as ag
from robustvit.autograd import Tensor


def t64(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)


# --- forward examples -----------------------------------------------------

def test_softmax_symmetric_pair():
    out = ag.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = ag.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_layernorm_moments():
    out = ag.layernorm(Tensor([1.0, 2.0, 3.0])).data.astype(np.float64)
    assert abs(out.mean()) < 1e-6
    assert abs(out.var() - 1.0) < 1e-6


@given(st.integers(1, 5), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, k, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(n, k))
    out = ag.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_shape_error_names_op_and_dims():
    with pytest.raises(ag.ShapeError) as exc:
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "matmul" in str(exc.value) and "(2, 3)" in str(exc.value)


def test_float32_default_and_constant_lifting():
    x = Tensor([1.0, 2.0])
    assert x.dtype == np.float32
    assert (x * 0.5 + 1.0).dtype == np.float32


# --- backward examples ----------------------------------------------------

def test_mse_self_gradient_zero(rng):
    x = t64(rng, 4, 3)
    (g,) = ag.grad(ag.mse(x, x), [x])
    np.testing.assert_array_equal(g, 0.0)


def test_sum_of_double_gradient_is_two(rng):
    x = t64(rng, 5)
    (g,) = ag.grad(ag.sum_(ag.scale(x, 2.0)), [x])
    np.testing.assert_array_equal(g, 2.0)


def test_non_scalar_loss_rejected(rng):
    with pytest.raises(ValueError):
        ag.backward(t64(rng, 3) * 2.0)


def test_backward_accumulates_into_leaves(rng):
    x = t64(rng, 3)
    ag.backward(ag.sum_(x))
    ag.backward(ag.sum_(x))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_no_grad_records_nothing(rng):
    x = t64(rng, 3)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def _mlp3(rng):
    ws = [t64(rng, 4, 6), t64(rng, 6, 5), t64(rng, 5, 1)]

    def f(x, *params):
        h = ag.gelu(x @ params[0])
        h = ag.gelu(h @ params[1])
        return ag.sum_(h @ params[2])
    return ws, f


def test_three_layer_mlp_matches_finite_differences(rng):
    ws, f = _mlp3(rng)
    x = t64(rng, 5, 4)
    report = ag.finite_diff_check(f, [x] + ws)
    assert report.passed, report.max_rel_err


def test_finite_diff_simple_square():
    x = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    (g,) = ag.grad(ag.sum_(x * x), [x])
    np.testing.assert_allclose(g, [2.0, 4.0])
    assert ag.finite_diff_check(lambda a: ag.sum_(a * a), [x]).passed


def test_finite_diff_constant_function():
    x = Tensor([1.0, -3.0], dtype=np.float64)
    report = ag.finite_diff_check(lambda a: ag.sum_(ag.scale(a, 0.0)), [x])
    assert report.passed and report.max_rel_err == 0.0


def test_finite_diff_cross_entropy(rng):
    logits = t64(rng, 6, 4)
    y = rng.integers(0, 4, 6)
    assert ag.finite_diff_check(lambda z: ag.cross_entropy_logits(z, y), [logits]).passed


def test_finite_diff_reports_wrong_gradient():
    x = Tensor([0.3, -0.7], dtype=np.float64)

    def wrong(a):
        # forward is a^2 but backward claims 3 a^2
        out = Tensor._from_op(a.data ** 2, (a,), lambda g: (g * 3 * a.data ** 2,), "bad")
        return ag.sum_(out)
    report = ag.finite_diff_check(wrong, [x])
    assert not report.passed and report.failures


def test_finite_diff_restores_inputs(rng):
    x = Tensor(rng.normal(size=3).astype(np.float32))
    before = x.data.copy()
    ag.finite_diff_check(lambda a: ag.sum_(a * a), [x])
    assert x.dtype == np.float32 and not x.requires_grad
    np.testing.assert_array_equal(x.data, before)


# --- linearity, determinism ----------------------------------------------

@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng, 3, 4)
    w = t64(rng, 4, 2)

    def f():
        return ag.sum_(ag.gelu(x @ w))

    def g():
        return ag.mean(ag.softmax(x @ w))
    (gf,) = ag.grad(f(), [w])
    (gg,) = ag.grad(g(), [w])
    (gc,) = ag.grad(ag.scale(f(), a) + ag.scale(g(), b), [w])
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-6)


def test_gradients_are_deterministic(rng):
    ws, f = _mlp3(rng)
    x = t64(rng, 5, 4)
    first = ag.grad(f(x, *ws), ws)
    second = ag.grad(f(x, *ws), ws)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_gradient_shapes_match_tensors(rng):
    ws, f = _mlp3(rng)
    x = t64(rng, 5, 4)
    for w, g in zip(ws, ag.grad(f(x, *ws), ws)):
        assert g.shape == w.shape


# --- guided mode ----------------------------------------------------------

def test_guided_equals_standard_when_no_gate_fires():
    x = Tensor(np.array([[0.5, 1.0, 2.0]]), requires_grad=True, dtype=np.float64)
    w = Tensor(np.array([[1.0], [2.0], [0.5]]), requires_grad=True, dtype=np.float64)

    def f():
        return ag.sum_(ag.gelu(x) @ w)
    std = ag.grad(f(), [x, w])
    gui = ag.grad(f(), [x, w], mode="guided")
    for a, b in zip(std, gui):
        np.testing.assert_array_equal(a, b)


def test_guided_gate_with_negative_output_blocks():
    x = Tensor(np.array([-1.5]), requires_grad=True, dtype=np.float64)
    (g_std,) = ag.grad(ag.sum_(ag.gelu(x)), [x])
    (g_gui,) = ag.grad(ag.sum_(ag.gelu(x)), [x], mode="guided")
    assert g_std[0] != 0.0
    assert g_gui[0] == 0.0


def test_guided_gate_with_negative_incoming_gradient_blocks():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    (g,) = ag.grad(ag.scale(ag.sum_(ag.relu(x)), -1.0), [x], mode="guided")
    assert g[0] == 0.0


def test_guided_mode_only_changes_gates(rng):
    # a gate-free graph gives identical gradients in both modes
    x, w = t64(rng, 3, 4), t64(rng, 4, 2)
    f = lambda: ag.mean(ag.softmax(ag.layernorm(x @ w)))  # noqa: E731
    for a, b in zip(ag.grad(f(), [x, w]), ag.grad(f(), [x, w], mode="guided")):
        np.testing.assert_array_equal(a, b)


def test_unknown_backward_mode_rejected(rng):
    x = t64(rng, 2)
    with pytest.raises(ValueError):
        ag.grad(ag.sum_(x), [x], mode="sideways")
