import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from koda import tensor as T
from gradcases import PRIMITIVES
from oracles import check_gradients, forward_diff_jacobian, rel_err


def test_matmul_identity():
    out = T.matmul(T.Tensor([[1.0, 0.0], [0.0, 1.0]]), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_tanh_origin():
    assert T.tanh(T.Tensor([0.0])).data.tolist() == [0.0]


def test_mean_then_sum():
    m = T.mean(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0)
    np.testing.assert_array_equal(m.data, [2.0, 3.0])
    assert float(T.sum_(m).data) == 5.0


def test_square_gradient():
    w = T.Tensor([3.0])
    with T.Tape() as tape:
        tape.watch(w)
        loss = T.sum_(T.square(w))
    np.testing.assert_array_equal(tape.backward(loss)[w], [6.0])


def test_least_squares_gradient_at_zero():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    _, g = T.value_and_grad(lambda p: T.mean(T.square(p["w"] * x - y)), {"w": np.zeros(())})
    assert g["w"] == pytest.approx(-2 * np.mean(x * y), rel=1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(4)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_only_leading_broadcast():
    T.add(T.Tensor(np.ones((5, 2, 3))), T.Tensor(np.ones(3)))
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 1))))


def test_non_finite_names_op():
    with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError, match="multiply"):
        T.mul(T.Tensor([1e200]), T.Tensor([1e200]))


def test_non_scalar_and_detached_losses_rejected():
    w = T.Tensor(np.ones(3))
    with T.Tape() as tape:
        tape.watch(w)
        y = T.square(w)
        const = T.square(T.Tensor(np.ones(2)))
    with pytest.raises(T.GradientError, match="scalar"):
        tape.backward(y)
    with pytest.raises(T.GradientError, match="ancestry"):
        tape.backward(T.sum_(const))


def test_unreached_leaf_gets_zero():
    a, b = T.Tensor(np.ones(2)), T.Tensor(np.ones((3, 3)))
    with T.Tape() as tape:
        tape.watch(a)
        tape.watch(b)
        loss = T.sum_(a)
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[b], np.zeros((3, 3)))
    np.testing.assert_array_equal(g[a], np.ones(2))


def test_tape_nodes_topological():
    w = T.Tensor(np.ones(2))
    with T.Tape() as tape:
        tape.watch(w)
        T.sum_(T.tanh(T.mul(w, w)))
    seen = {id(w)}
    for node in tape.nodes:
        assert all(id(i) in seen or i._node is None for i in node.inputs)
        seen.add(id(node.output))


def test_vjp_linear_map():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    v = rng.normal(size=4)
    got = T.vjp(lambda x: T.matmul(T.Tensor(a), T.reshape(x, (3, 1))), rng.normal(size=3), v.reshape(4, 1))
    np.testing.assert_allclose(got, a.T @ v, rtol=1e-12)


def test_vjp_tanh():
    x = np.linspace(-2, 2, 7)
    v = np.arange(7.0)
    np.testing.assert_allclose(T.vjp(T.tanh, x, v), v * (1 - np.tanh(x) ** 2), rtol=1e-12)


def test_vjp_rejects_bad_cotangent():
    with pytest.raises(T.ShapeError):
        T.vjp(T.tanh, np.ones(3), np.ones(4))


def test_vjp_mlp_matches_fd_jacobian():
    rng = np.random.default_rng(2)
    w1, b1 = rng.normal(size=(3, 8)), rng.normal(size=8)
    w2, b2 = rng.normal(size=(8, 2)), rng.normal(size=2)

    def f(x):
        return T.linear(T.tanh(T.linear(x, w1, b1)), w2, b2)

    x = rng.uniform(-2, 2, size=3)
    jac = forward_diff_jacobian(lambda z: f(T.Tensor(z)).data, x)
    for i in range(2):
        e = np.eye(2)[i]
        assert rel_err(T.vjp(f, x, e), jac[i]) < 1e-4


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    checked = 0
    while checked < 20:
        arrays = {k: rng.uniform(-2, 2, size=s) for k, s in shapes.items()}
        err = check_gradients(fn, arrays, rng)
        if err is None:
            continue
        assert err < 1e-4, f"{name}: relative error {err}"
        checked += 1


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (4,), elements=st.floats(-2, 2)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(x, a, b):
    def grad(fn):
        return T.value_and_grad(fn, {"x": x})[1]["x"]

    f = lambda p: T.sum_(T.tanh(p["x"]))
    g = lambda p: T.sum_(T.square(p["x"]))
    combo = grad(lambda p: T.add(T.mul(f(p), a), T.mul(g(p), b)))
    np.testing.assert_allclose(combo, a * grad(f) + b * grad(g), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (3,), elements=st.floats(-2, 2)))
def test_vjp_agrees_with_backward(x):
    w = np.array([[0.5, -1.0], [2.0, 0.3], [-0.7, 1.1]])
    inner = lambda z: T.tanh(T.linear(z, w))
    outer = lambda y: T.sum_(T.square(y))
    _, g = T.value_and_grad(lambda p: outer(inner(p["x"])), {"x": x})
    y = inner(T.Tensor(x)).data
    np.testing.assert_allclose(T.vjp(inner, x, 2 * y), g["x"], atol=1e-12)


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(8, 5)), rng.normal(size=(5, 4))
    a = T.sigmoid(T.linear(T.Tensor(x), T.Tensor(w))).data
    b = T.sigmoid(T.linear(T.Tensor(x), T.Tensor(w))).data
    assert a.tobytes() == b.tobytes()
