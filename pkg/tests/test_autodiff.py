import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amortsteer import autodiff as ad

import oracles


def numeric_grad(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_of(build, x):
    leaf = ad.leaf(x)
    out = build(leaf)
    ad.backward(out)
    return leaf.grad


# ------------------------------------------------------------------ matmul


def test_matmul_identity_and_hand_product():
    assert np.array_equal(ad.matmul(np.eye(2), [[2.0], [3.0]]).value, [[2.0], [3.0]])
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).value.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    b = np.array([[3.0], [4.0]])
    g = grad_of(lambda a: ad.sum(a @ b), [[1.0, 2.0]])
    fd = numeric_grad(lambda a: float((a @ b).sum()), [[1.0, 2.0]], h=1e-6)
    assert np.allclose(g, [[3.0, 4.0]])
    assert np.allclose(g, fd, atol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ------------------------------------------------------------- elementwise


def test_elementwise_values():
    assert ad.elementwise("abs", np.array([-1.0, 2.0])).value.tolist() == [1.0, 2.0]
    assert ad.elementwise("mul", np.array([1.0, 2.0]), np.array([3.0, 4.0])).value.tolist() == [3.0, 8.0]
    assert ad.elementwise("pow", np.array([2.0, 3.0]), p=2).value.tolist() == [4.0, 9.0]
    assert ad.elementwise("scale", np.array([2.0]), c=-1.5).value.tolist() == [-3.0]
    assert ad.elementwise("relu", np.array([-1.0, 2.0])).value.tolist() == [0.0, 2.0]


def test_abs_gradient_sign_and_zero_subgradient():
    assert grad_of(lambda a: ad.sum(ad.abs(a)), [-3.0]).tolist() == [-1.0]
    assert grad_of(lambda a: ad.sum(ad.abs(a)), [0.0]).tolist() == [0.0]
    fd = numeric_grad(lambda a: float(np.abs(a).sum()), [-3.0])
    assert np.allclose(fd, [-1.0])


def test_incompatible_shapes_rejected():
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones(3), np.ones(2))
    with pytest.raises(ad.ShapeError):
        ad.mul(np.ones((2, 3)), np.ones(3))


def test_scalar_broadcast_gradient_sums():
    s = ad.leaf(2.0)
    x = ad.leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum(s * x))
    assert float(s.grad) == 6.0
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


UNARY = {
    "abs": (lambda n: ad.abs(n), np.abs),
    "pow3": (lambda n: ad.pow(n, 3), lambda v: v**3),
    "relu": (lambda n: ad.relu(n), lambda v: np.maximum(v, 0)),
    "tanh": (lambda n: ad.tanh(n), np.tanh),
    "scale": (lambda n: ad.scale(n, -0.7), lambda v: -0.7 * v),
    "sqrt": (lambda n: ad.sqrt(ad.abs(n)), lambda v: np.sqrt(np.abs(v))),
    "layer_norm": (
        lambda n: ad.layer_norm(n),
        lambda v: (v - v.mean(1, keepdims=True)) / np.sqrt(v.var(1, keepdims=True) + 1e-5),
    ),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_random_gradient_check(name):
    op, ref = UNARY[name]
    rng = np.random.default_rng(sorted(UNARY).index(name))
    checked = 0
    while checked < 100:
        x = rng.normal(size=(3, 4))
        if np.abs(x).min() < 1e-3:  # stay clear of abs/relu kinks
            continue
        weights = rng.normal(size=x.shape)
        g = grad_of(lambda n: ad.sum(op(n) * weights), x)
        if name == "layer_norm":
            fd = numeric_grad(lambda v: float((ref(v) * weights).sum()), x)
        else:
            # elementwise: difference each term on its own, free of cancellation in the sum
            h = 1e-5
            fd = (ref(x + h) - ref(x - h)) / (2 * h) * weights
        assert np.all(np.abs(g - fd) / (np.abs(fd) + 1e-8) < 1e-5)
        checked += 1


def test_binary_ops_random_gradient_check():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
        w = rng.normal(size=(2, 2))
        ga = grad_of(lambda n: ad.sum((n @ b) * w), a)
        gb = grad_of(lambda n: ad.sum((a @ n) * w), b)
        assert np.allclose(ga, numeric_grad(lambda v: float(((v @ b) * w).sum()), a), rtol=1e-6, atol=1e-9)
        assert np.allclose(gb, numeric_grad(lambda v: float(((a @ v) * w).sum()), b), rtol=1e-6, atol=1e-9)
        c = rng.normal(size=(2, 3))
        gm = grad_of(lambda n: ad.sum(n * c - n + c), a)
        assert np.allclose(gm, c - 1.0)


def test_shape_plumbing_gradients():
    v = ad.leaf([1.0, 2.0])
    ad.backward(ad.sum(ad.tile_rows(v, 3) * np.arange(6.0).reshape(3, 2)))
    assert v.grad.tolist() == [6.0, 9.0]
    a, b = ad.leaf(np.ones((2, 2))), ad.leaf(np.ones((1, 2)))
    ad.backward(ad.sum(ad.concat([a, b], axis=0) * np.arange(6.0).reshape(3, 2)))
    assert a.grad.tolist() == [[0.0, 1.0], [2.0, 3.0]] and b.grad.tolist() == [[4.0, 5.0]]
    t = ad.leaf(np.arange(4.0))
    ad.backward(ad.sum(ad.take(t, np.array([0, 0, 3]))))
    assert t.grad.tolist() == [2.0, 0.0, 0.0, 1.0]


# -------------------------------------------------------------------- sort


def test_sort_values_and_permutation():
    r = ad.sort_ascending(np.array([3.0, 1.0, 2.0]))
    assert r.sorted_values.value.tolist() == [1.0, 2.0, 3.0]
    assert r.permutation.tolist() == [1, 2, 0]
    r = ad.sort_ascending(np.array([1.0, 2.0, 3.0]))
    assert r.permutation.tolist() == [0, 1, 2]


def test_sort_gradient_routes_through_permutation():
    x = ad.leaf([3.0, 1.0, 2.0])
    r = ad.sort_ascending(x)
    ad.backward(ad.sum(r.sorted_values * np.array([10.0, 20.0, 30.0])))
    assert x.grad.tolist() == [30.0, 10.0, 20.0]


def test_sort_is_stable_and_rejects_nan():
    r = ad.sort_ascending(np.array([2.0, 1.0, 2.0, 1.0]))
    assert r.permutation.tolist() == [1, 3, 0, 2]
    with pytest.raises(ValueError):
        ad.sort_ascending(np.array([1.0, np.nan]))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_sort_then_inverse_permutation_is_identity(x):
    r = ad.sort_ascending(x)
    assert np.all(np.diff(r.sorted_values.value) >= 0)
    assert sorted(r.permutation.tolist()) == list(range(len(x)))
    back = np.empty_like(x)
    back[r.permutation] = r.sorted_values.value
    assert np.array_equal(back, x)


def test_sort_columns_matches_per_column_sort():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    leaf = ad.leaf(x)
    r = ad.sort_columns(leaf)
    assert np.array_equal(r.sorted_values.value, np.sort(x, axis=0))
    up = rng.normal(size=x.shape)
    ad.backward(ad.sum(r.sorted_values * up))
    for j in range(3):
        expect = np.empty(5)
        expect[np.argsort(x[:, j], kind="stable")] = up[:, j]
        assert np.array_equal(leaf.grad[:, j], expect)


# ---------------------------------------------------------------- reduce


def test_reductions():
    assert ad.reduce("sum", np.array([1.0, 2.0, 3.0])).value == 6.0
    assert ad.reduce("mean", np.array([2.0, 4.0])).value == 3.0
    assert grad_of(lambda n: ad.reduce("mean", n), [1.0, 7.0]).tolist() == [0.5, 0.5]
    with pytest.raises(ValueError):
        ad.reduce("mean", np.array([]))


# --------------------------------------------------------------- backward


def test_backward_analytic_and_constant():
    a = ad.leaf([1.0, 1.0])
    ad.backward(ad.sum(np.array([2.0, 3.0]) * a))
    assert a.grad.tolist() == [2.0, 3.0]
    b = ad.leaf([1.0, 2.0])
    ad.backward(ad.sum(ad.constant([4.0, 5.0])))
    assert b.grad.tolist() == [0.0, 0.0]


def test_backward_accumulates_across_calls_and_needs_scalar():
    a = ad.leaf([1.0, 2.0])
    loss = ad.sum(a * a)
    ad.backward(loss)
    ad.backward(loss)
    assert a.grad.tolist() == [4.0, 8.0]
    a.zero_grad()
    assert a.grad.tolist() == [0.0, 0.0]
    with pytest.raises(ad.ShapeError):
        ad.backward(a * 2.0)


def test_reused_node_accumulates_every_use():
    x = ad.leaf([1.5, -2.0])
    y = ad.scale(x, 3.0)
    k = 5
    total = y
    for _ in range(k - 1):
        total = total + y
    ad.backward(ad.sum(total))
    assert x.grad.tolist() == [3.0 * k, 3.0 * k]


def test_w1_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 8))
    y = rng.normal(size=(6, 8)) + 0.5
    leaf = ad.leaf(x)
    diff = ad.sort_columns(leaf).sorted_values - np.sort(y, axis=0)
    ad.backward(ad.sum(ad.mean(ad.abs(diff), axis=0)))
    fd = numeric_grad(lambda v: oracles.alignment_loss({"s": v}, {"s": y}, 1), x)
    assert np.max(np.abs(leaf.grad - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_grad_has_value_shape(seed):
    rng = np.random.default_rng(seed)
    x = ad.leaf(rng.normal(size=(3, 2)))
    ad.backward(ad.sum(ad.tanh(x @ rng.normal(size=(2, 4)))))
    assert x.grad.shape == x.value.shape
