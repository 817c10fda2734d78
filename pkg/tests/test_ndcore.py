import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bayesncl.ndcore import (NORM_FLOOR, DomainError, Graph, ShapeError, as_tensor, backward, grad_check,
                             logsumexp_rows, sigmoid)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_as_tensor_promotes_to_2d_float64():
    t = as_tensor([1, 2, 3])
    assert t.shape == (1, 3) and t.dtype == np.float64
    assert as_tensor(np.float32(2.0)).shape == (1, 1)


def test_shape_mismatch_raises():
    g = Graph()
    a = g.const(np.ones((2, 3)))
    b = g.const(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        g.add(a, b)
    with pytest.raises(ShapeError):
        g.matmul(a, a)


def test_log_of_nonpositive_is_domain_error():
    g = Graph()
    with pytest.raises(DomainError):
        g.log(g.const(np.array([[1.0, 0.0]])))


@given(arrays(np.float64, (3, 4), elements=finite))
def test_sigmoid_symmetry(x):
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)


def test_sigmoid_stays_finite_at_extremes():
    s = sigmoid(np.array([[-1000.0, 0.0, 1000.0]]))
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [[0.0, 0.5, 1.0]])


@given(arrays(np.float64, (2, 5), elements=st.floats(-700, 700)))
def test_logsumexp_rows_matches_shifted_reference(x):
    m = x.max(axis=1, keepdims=True)
    ref = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(logsumexp_rows(x), ref, rtol=1e-12)


def test_backward_unused_param_gets_zero():
    g = Graph()
    a = g.param(np.ones((2, 2)))
    b = g.param(np.full((2, 2), 3.0))
    out = g.mean_all(g.mul(a, a))
    grads = backward(g, out)
    np.testing.assert_allclose(grads[a], 0.5 * np.ones((2, 2)))
    np.testing.assert_array_equal(grads[b], 0.0)


def test_backward_needs_scalar_output():
    g = Graph()
    a = g.param(np.ones((2, 2)))
    with pytest.raises(ValueError):
        backward(g, g.relu(a))


def test_stop_gradient_blocks_flow():
    g = Graph()
    a = g.param(np.array([[2.0]]))
    out = g.mean_all(g.mul(g.stop_gradient(a), a))
    assert backward(g, out)[a][0, 0] == pytest.approx(2.0)


@pytest.mark.parametrize("op", ["relu", "sigmoid", "exp", "neg", "row_sum", "logsumexp_rows",
                                "l2_normalize_rows"])
def test_unary_ops_pass_grad_check(op):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4)) + 0.05

    def f(g, ids):
        return g.mean_all(g.mul(getattr(g, op)(ids[0]), getattr(g, op)(ids[0])))

    assert grad_check(f, [x]) < 1e-7


def test_matmul_and_log_pass_grad_check():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0.5, 1.5, (3, 4)), rng.uniform(0.5, 1.5, (2, 4))

    def f(g, ids):
        return g.mean_all(g.log(g.matmul(ids[0], ids[1], trans_b=True)))

    assert grad_check(f, [a, b]) < 1e-7


def test_grad_check_skips_relu_kinks():
    x = np.array([[1e-9, 1.0]])

    def f(g, ids):
        return g.mean_all(g.relu(ids[0]))

    err, n = grad_check(f, [x], eps=1e-6, return_count=True)
    assert n == 1 and err < 1e-9


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda g, ids: g.mean_all(ids[0]), [np.ones((1, 1))], eps=1e-2)


def test_l2_normalize_zero_row_has_zero_subgradient():
    g = Graph()
    x = g.param(np.array([[0.0, 0.0], [3.0, 4.0]]))
    y = g.l2_normalize_rows(x)
    np.testing.assert_allclose(g.value(y), [[0.0, 0.0], [0.6, 0.8]])
    grads = backward(g, g.mean_all(g.mul(y, g.const(np.ones((2, 2))))))
    np.testing.assert_array_equal(grads[x][0], 0.0)
    assert np.all(np.isfinite(grads[x]))
    assert NORM_FLOOR > 0
