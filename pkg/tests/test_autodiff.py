import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wpl_lab.autodiff import (
    Graph,
    NonFiniteError,
    ShapeError,
    UnboundNodeError,
    backward,
    finite_diff_gradient,
    forward,
)

from .gradcheck import OPS, assert_grad_close, op_instance


def test_identity_forward():
    g = Graph()
    x = g.input("x")
    y = g.activation(x, "identity")
    out = forward(g, {"x": np.array([1.0, 2.0, 3.0])})
    np.testing.assert_array_equal(out[y], [1.0, 2.0, 3.0])


def test_uniform_softmax_xent_is_ln2():
    g = Graph()
    loss = g.softmax_cross_entropy(g.input("z"), g.input("t"))
    out = forward(g, {"z": np.array([[0.0, 0.0]]), "t": np.array([[1.0, 0.0]])})
    assert out[loss] == pytest.approx(np.log(2.0), abs=1e-15)


def _mlp_by_hand(x, W1, b1, W2, b2):
    # straight-line reference, written independently of the graph code
    n, d = x.shape
    h = np.empty((n, W1.shape[1]))
    for i in range(n):
        for j in range(W1.shape[1]):
            s = b1[j]
            for k in range(d):
                s += x[i, k] * W1[k, j]
            h[i, j] = np.tanh(s)
    out = np.empty((n, W2.shape[1]))
    for i in range(n):
        for j in range(W2.shape[1]):
            s = b2[j]
            for k in range(W1.shape[1]):
                s += h[i, k] * W2[k, j]
            out[i, j] = s
    return out


def test_two_layer_mlp_matches_hand_written_forward():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    p = {"W1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4), "W2": rng.normal(size=(4, 2)), "b2": rng.normal(size=2)}
    g = Graph()
    h = g.tanh(g.add(g.matmul(g.input("x"), g.param("W1")), g.param("b1")))
    out = g.add(g.matmul(h, g.param("W2")), g.param("b2"))
    got = forward(g, {"x": x, **p})[out]
    np.testing.assert_allclose(got, _mlp_by_hand(x, **p), rtol=1e-13, atol=1e-14)


def test_backward_of_square():
    g = Graph()
    x = g.param("x")
    loss = g.sum_of_squares(x)
    vals = forward(g, {"x": np.array(3.0)})
    assert backward(g, vals, loss)["x"] == pytest.approx(6.0)


def test_xent_gradient_is_softmax_minus_target():
    z = np.array([[0.3, -1.2, 2.0]])
    t = np.array([[0.0, 1.0, 0.0]])
    g = Graph()
    loss = g.softmax_cross_entropy(g.param("z"), g.input("t"))
    grads = backward(g, forward(g, {"z": z, "t": t}), loss)
    sm = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(grads["z"], sm - t, rtol=1e-14)


def test_gradient_keys_are_exactly_reachable_params():
    g = Graph()
    a, b, c = g.param("a"), g.param("b"), g.param("c")
    loss = g.sum_of_squares(g.add(a, b))
    g.sum_of_squares(c)  # not reachable from loss
    vals = forward(g, {"a": np.ones(2), "b": np.ones(2), "c": np.ones(2)})
    assert set(backward(g, vals, loss)) == {"a", "b"}


def test_unused_reachable_param_gets_zero_gradient():
    g = Graph()
    a = g.param("a")
    loss = g.scale(g.sum_of_squares(a), 0.0)
    grads = backward(g, forward(g, {"a": np.ones(3)}), loss)
    np.testing.assert_array_equal(grads["a"], np.zeros(3))


def test_backward_rejects_non_scalar():
    g = Graph()
    y = g.tanh(g.param("a"))
    with pytest.raises(ShapeError):
        backward(g, forward(g, {"a": np.ones(2)}), y)


def test_errors_on_shape_mismatch_unbound_and_nonfinite():
    g = Graph()
    y = g.matmul(g.input("a"), g.input("b"))
    with pytest.raises(ShapeError):
        forward(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    with pytest.raises(UnboundNodeError):
        forward(g, {"a": np.ones((2, 3))})
    with pytest.raises(NonFiniteError):
        forward(g, {"a": np.full((1, 1), np.inf), "b": np.ones((1, 1))})
    assert y.op == "matmul"


def test_add_rejects_bad_broadcast():
    g = Graph()
    g.add(g.input("a"), g.input("b"))
    with pytest.raises(ShapeError):
        forward(g, {"a": np.ones((2, 3)), "b": np.ones(2)})


def test_foreign_node_rejected():
    g1, g2 = Graph(), Graph()
    a = g1.input("a")
    g2.input("a")
    g2.input("b")
    with pytest.raises(ValueError):
        g2.tanh(g2.add(g2.nodes[1], a))


def test_leaf_names_are_deduplicated():
    g = Graph()
    assert g.param("w") is g.param("w")
    with pytest.raises(ValueError):
        g.input("w")


def test_outputs_limits_evaluation():
    g = Graph()
    a = g.input("a")
    y = g.tanh(a)
    g.add(y, g.input("unbound"))
    out = forward(g, {"a": np.zeros(2)}, outputs=y)
    assert set(out) == {a, y}


def test_fd_of_square_and_constant():
    assert finite_diff_gradient(lambda p: float(p["x"] ** 2), {"x": np.array(3.0)})["x"] == pytest.approx(6.0, abs=1e-9)
    z = finite_diff_gradient(lambda p: 4.0, {"x": np.ones(3)})
    np.testing.assert_array_equal(z["x"], np.zeros(3))


def test_fd_rejects_bad_epsilon_and_nonfinite():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda p: 0.0, {"x": np.ones(1)}, epsilon=0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_gradient(lambda p: float("nan"), {"x": np.ones(1)})


@pytest.mark.parametrize("op", OPS)
def test_each_op_matches_finite_differences(op):
    for seed in range(5):
        fn, params, grads = op_instance(op, np.random.default_rng(seed))
        assert_grad_close(grads, finite_diff_gradient(fn, params))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_forward_is_pure(z):
    g = Graph()
    y = g.tanh(g.matmul(g.input("z"), g.input("w")))
    w = np.linspace(-1, 1, 8).reshape(4, 2)
    a = forward(g, {"z": z, "w": w})[y]
    b = forward(g, {"z": z, "w": w})[y]
    assert a.tobytes() == b.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-30, 30)), st.lists(st.integers(0, 4), min_size=4, max_size=4))
def test_xent_nonnegative_and_gradient_rows_sum_to_zero(z, labels):
    t = np.eye(5)[labels]
    g = Graph()
    loss = g.softmax_cross_entropy(g.param("z"), g.input("t"))
    vals = forward(g, {"z": z, "t": t})
    assert vals[loss] >= 0.0
    np.testing.assert_allclose(backward(g, vals, loss)["z"].sum(axis=1), 0.0, atol=1e-15)


def test_xent_is_stable_for_huge_logits():
    g = Graph()
    loss = g.softmax_cross_entropy(g.param("z"), g.input("t"))
    vals = forward(g, {"z": np.array([[1e4, -1e4]]), "t": np.array([[0.0, 1.0]])})
    assert vals[loss] == pytest.approx(2e4)
