import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajflow import autodiff as ad

H = 1e-5


def central_difference(f, x, direction):
    return (f(x + H * direction) - f(x - H * direction)) / (2 * H)


UNARY = {
    "sigmoid": (ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "tanh": (ad.tanh, np.tanh),
    "sin": (ad.sin, np.sin),
    "cos": (ad.cos, np.cos),
    "silu": (ad.silu, lambda x: x / (1 + np.exp(-x))),
    "square": (ad.square, np.square),
    "relu": (ad.relu, lambda x: np.maximum(x, 0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_forward_matches_numpy(name):
    op, ref = UNARY[name]
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(ad.value(op(x)), ref(x), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_derivatives_match_finite_differences(name):
    op, ref = UNARY[name]
    rng = np.random.default_rng(1)
    x = rng.uniform(0.2, 2.0, (4, 3)) * rng.choice([-1, 1], (4, 3))
    t = rng.standard_normal(x.shape)
    w = rng.standard_normal(x.shape)
    fd = central_difference(ref, x, t)
    _, tangent = ad.jvp(op, [x], [t])
    np.testing.assert_allclose(tangent, fd, rtol=1e-7, atol=1e-9)

    tape = ad.Tape()
    xt = tape.watch("x", x)
    g = ad.backward(tape, ad.sum(ad.mul(op(xt), w)))["x"]
    np.testing.assert_allclose(g * t, w * fd, rtol=1e-6, atol=1e-9)


def test_matmul_gradients_are_transposed_products():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    w = rng.standard_normal((3, 2))
    tape = ad.Tape()
    ga = ad.backward(tape, ad.sum(ad.mul(ad.matmul(tape.watch("a", a), tape.watch("b", b)), w)))
    np.testing.assert_allclose(ga["a"], w @ b.T, rtol=1e-14)
    np.testing.assert_allclose(ga["b"], a.T @ w, rtol=1e-14)


def test_broadcast_gradients_are_reduced_to_input_shape():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    c = rng.standard_normal((3, 1))
    tape = ad.Tape()
    out = ad.sum(ad.mul(ad.add(tape.watch("a", a), tape.watch("b", b)), tape.watch("c", c)))
    g = ad.backward(tape, out)
    np.testing.assert_allclose(g["a"], np.broadcast_to(c, (3, 4)))
    np.testing.assert_allclose(g["b"], np.broadcast_to(c, (3, 4)).sum(axis=0))
    np.testing.assert_allclose(g["c"], (a + b).sum(axis=1, keepdims=True))


def test_mean_and_sum_gradients():
    x = np.arange(12.0).reshape(3, 4)
    tape = ad.Tape()
    g = ad.backward(tape, ad.mean(tape.watch("x", x)))["x"]
    np.testing.assert_array_equal(g, np.full((3, 4), 1 / 12))
    tape = ad.Tape()
    xt = tape.watch("x", x)
    g = ad.backward(tape, ad.sum(ad.sum(xt, axis=1, keepdims=True)))["x"]
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_concat_splits_gradient_and_fills_missing_tangents():
    a, b = np.ones((2, 1)), 2 * np.ones((2, 3))
    tape = ad.Tape()
    w = np.arange(8.0).reshape(2, 4)
    g = ad.backward(tape, ad.sum(ad.mul(ad.concat([tape.watch("a", a), tape.watch("b", b)]), w)))
    np.testing.assert_array_equal(g["a"], w[:, :1])
    np.testing.assert_array_equal(g["b"], w[:, 1:])
    # only the first block carries a tangent
    _, tangent = ad.jvp(lambda x: ad.concat([x, b]), [a], [np.full((2, 1), 5.0)])
    np.testing.assert_array_equal(tangent, np.hstack([np.full((2, 1), 5.0), np.zeros((2, 3))]))


def test_stopgrad_blocks_both_modes():
    x = np.array([1.0, -2.0])
    tape = ad.Tape()
    xt = tape.watch("x", x)
    out = ad.sum(ad.add(ad.square(xt), ad.stopgrad(ad.square(xt))))
    np.testing.assert_array_equal(ad.backward(tape, out)["x"], 2 * x)
    value, tangent = ad.jvp(lambda z: ad.stopgrad(ad.square(z)), [x], [np.ones(2)])
    np.testing.assert_array_equal(value, x ** 2)
    np.testing.assert_array_equal(tangent, 0.0)


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.watch("x", np.ones(3))
    tape.watch("unused", np.ones((2, 2)))
    g = ad.backward(tape, ad.sum(x))
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))


def test_jvp_broadcasts_scalar_tangent():
    t = np.array([[0.2], [0.7]])
    _, tangent = ad.jvp(lambda s: ad.sin(s), [t], [1.0])
    np.testing.assert_allclose(tangent, np.cos(t))


def test_plain_arrays_are_constants():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)
    _, tangent = ad.jvp(lambda x: ad.mul(x, np.array([3.0, 4.0])), [np.ones(2)], [np.ones(2)])
    np.testing.assert_array_equal(tangent, [3.0, 4.0])


def test_error_cases():
    tape = ad.Tape()
    x = tape.watch("x", np.ones(3))
    with pytest.raises(ValueError, match="already"):
        tape.watch("x", np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, ad.square(x))
    with pytest.raises(ValueError, match="detached"):
        ad.backward(ad.Tape(), ad.sum(x))
    with pytest.raises(ValueError, match="tangent shape"):
        ad.jvp(ad.sin, [np.ones(3)], [np.ones(2)])
    with pytest.raises(TypeError):
        dual = ad.DualTensor(np.ones(3), np.ones(3))
        ad.add(x, dual)
    with pytest.raises(ValueError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_output_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.mul(np.array([np.inf]), np.array([0.0]))
    tape = ad.Tape()
    x = tape.watch("x", np.array([1e200]))
    with pytest.raises(ad.NonFiniteError):
        ad.square(x)


def test_replay_reproduces_forward_values():
    tape = ad.Tape()
    x = tape.watch("x", np.array([0.5, 1.5]))
    y = ad.sum(ad.silu(ad.scale(x, 2.0)))
    values = tape.replay()
    assert values[y.index] == pytest.approx(float(y.data), rel=0, abs=0)
    replayed = tape.replay({"x": np.array([1.0, 1.0])})
    assert replayed[y.index] == pytest.approx(2 * (2 / (1 + np.exp(-2.0))))


def test_primitive_set_is_closed_list():
    assert ad.primitive_set() == sorted([
        "add", "add_bias", "concat", "cos", "matmul", "mean", "mul", "relu", "scale",
        "sigmoid", "silu", "sin", "square", "stopgrad", "sub", "sum", "tanh"])


small_arrays = arrays(np.float64, (3, 2), elements=st.floats(-3, 3))


@settings(max_examples=30, deadline=None)
@given(small_arrays, small_arrays, small_arrays, st.floats(-2, 2))
def test_jvp_is_linear_in_tangent(x, t1, t2, c):
    def f(z):
        return ad.tanh(ad.mul(z, ad.silu(z)))

    _, a = ad.jvp(f, [x], [t1])
    _, b = ad.jvp(f, [x], [t2])
    _, ab = ad.jvp(f, [x], [c * t1 + t2])
    np.testing.assert_allclose(ab, c * a + b, rtol=1e-9, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(small_arrays, small_arrays, small_arrays)
def test_forward_and_reverse_modes_are_dual(x, t, w):
    def f(z):
        return ad.sin(ad.mul(z, ad.sigmoid(z)))

    _, tangent = ad.jvp(f, [x], [t])
    tape = ad.Tape()
    g = ad.backward(tape, ad.sum(ad.mul(f(tape.watch("x", x)), w)))["x"]
    lhs, rhs = np.sum(w * tangent), np.sum(g * t)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
