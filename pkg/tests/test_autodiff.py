import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from gift.autodiff import (
    Graph,
    ShapeError,
    Tensor,
    avg_pool2d,
    constant,
    conv2d,
    evaluate_with_grad,
    finite_diff_grad,
    instance_norm,
    logaddexp,
    matmul,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _fd_check(build, inputs, tol=1e-6):
    """Compare reverse-mode gradients with central differences for every input."""
    graph = Graph(build)
    _, grads = evaluate_with_grad(graph, inputs)
    for name, x in inputs.items():
        def f(v, name=name):
            args = {k: Tensor(v if k == name else a) for k, a in inputs.items()}
            return build(**args).item()

        fd = finite_diff_grad(f, x)
        assert_allclose(grads[name], fd, rtol=tol, atol=tol, err_msg=name)


# -- spec examples -----------------------------------------------------------


def test_sum_of_squares_value_and_grad():
    out, grads = evaluate_with_grad(Graph(lambda x: (x * x).sum()), {"x": np.array([1.0, 2.0, 3.0])})
    assert out["loss"] == 14.0
    assert_array_equal(grads["x"], [2.0, 4.0, 6.0])


def test_sum_grad_is_all_ones(rng):
    x = rng.standard_normal((3, 4))
    _, grads = evaluate_with_grad(Graph(lambda x: x.sum()), {"x": x})
    assert_array_equal(grads["x"], np.ones((3, 4)))


def test_constant_output_has_zero_grad():
    _, grads = evaluate_with_grad(Graph(lambda x: constant(np.array(3.0)) + 0.0 * x.sum()), {"x": np.ones(3)})
    assert_array_equal(grads["x"], np.zeros(3))
    _, grads = evaluate_with_grad(Graph(lambda x, c: (x * c).sum()), {"x": np.ones(2), "c": np.ones(2)}, wrt=["x"])
    assert set(grads) == {"x"}


def test_finite_diff_square():
    assert abs(finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))[0] - 6.0) < 1e-6


def test_finite_diff_constant_and_linear(rng):
    x = rng.standard_normal(5)
    assert_array_equal(finite_diff_grad(lambda v: 2.5, x), np.zeros(5))
    a = rng.standard_normal(5)
    assert_allclose(finite_diff_grad(lambda v: float(a @ v), x), a, atol=1e-9)


def test_finite_diff_nan_raises():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: float("nan"), np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.zeros(2), h=0.0)


# -- errors ------------------------------------------------------------------


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_non_scalar_backward_raises():
    with pytest.raises(ShapeError):
        evaluate_with_grad(Graph(lambda x: x * 2.0), {"x": np.ones(3)})


def test_graph_records_nodes_and_named_outputs():
    g = Graph(lambda x: {"loss": (x * x).sum(), "double": x * 2.0})
    out, grads = evaluate_with_grad(g, {"x": np.array([1.0, -1.0])})
    assert_array_equal(out["double"], [2.0, -2.0])
    assert len(g.nodes) >= 3


def test_repeated_evaluation_does_not_accumulate():
    g = Graph(lambda x: (x * x).sum())
    first = evaluate_with_grad(g, {"x": np.ones(2)})[1]["x"]
    second = evaluate_with_grad(g, {"x": np.ones(2)})[1]["x"]
    assert_array_equal(first, second)


# -- gradient checks per op ---------------------------------------------------


def test_elementwise_ops_grad(rng):
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (4,))
    _fd_check(lambda a, b: ((a * b) / (a + b) - (a - b) ** 2.0).sum(), {"a": a, "b": b})
    _fd_check(lambda a, b: (a.exp() + a.log() + a.sqrt() - b.relu()).mean(), {"a": a, "b": b - 1.0})


def test_reductions_and_reshape_grad(rng):
    x = rng.standard_normal((2, 3, 4))
    _fd_check(lambda x: (x.sum(axis=1, keepdims=True) * x).mean(axis=(0, 2)).sum(), {"x": x})
    _fd_check(lambda x: (x.reshape(6, 4) @ constant(np.arange(8.0).reshape(4, 2))).sum(), {"x": x})


def test_softmax_family_grad(rng):
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((4, 5))
    _fd_check(lambda x: (x.softmax(axis=1) * constant(w)).sum(), {"x": x})
    _fd_check(lambda x: (x.log_softmax(axis=1) * constant(w)).sum(), {"x": x})
    _fd_check(lambda x: (x.l2_norm(axis=1) * 1.0).sum(), {"x": x})
    _fd_check(lambda x: logaddexp(x, w).sum(), {"x": x})


def test_matmul_grad(rng):
    _fd_check(lambda a, b: (matmul(a, b) ** 2.0).sum(), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))})


def test_conv_pool_norm_grad(rng):
    x = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.3
    b = rng.standard_normal(3)
    probe = rng.standard_normal((2, 3, 2, 2))
    _fd_check(lambda x, w, b: (avg_pool2d(instance_norm(conv2d(x, w, b)), 2) * constant(probe)).sum(),
              {"x": x, "w": w, "b": b}, tol=1e-5)


def test_conv_matches_direct_correlation(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), None, padding=1).data
    padded = np.pad(x[0, 0], 1)
    ref = np.array([[np.sum(padded[i:i + 3, j:j + 3] * w[0, 0]) for j in range(4)] for i in range(4)])
    assert_allclose(out[0, 0], ref, atol=1e-12)


def test_pool_crops_odd_extent():
    x = Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
    out = avg_pool2d(x, 2).data
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0, 0, 0] == np.mean([0, 1, 5, 6])


def test_softmax_stable_for_large_logits():
    p = Tensor(np.array([[1000.0, 0.0]])).softmax(axis=1).data
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0


# -- properties --------------------------------------------------------------


@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_quadratic_grad_property(x):
    _, grads = evaluate_with_grad(Graph(lambda v: (v * v).sum()), {"v": x})
    assert_allclose(grads["v"], 2 * x, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_linearity_of_gradients(a, b):
    f = Graph(lambda x, y: (x * y).sum() + (x + y).sum())
    _, g = evaluate_with_grad(f, {"x": a, "y": b})
    assert_allclose(g["x"], b + 1.0)
    assert_allclose(g["y"], a + 1.0)


@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_rows_normalize(x):
    p = np.exp(Tensor(x).log_softmax(axis=1).data)
    assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert math.isclose(float(Tensor(x).softmax(axis=1).data.sum()), 2.0, rel_tol=1e-12)
