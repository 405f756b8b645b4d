import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amortsteer import autodiff as ad
from amortsteer.generator import forward
from amortsteer.steering import (
    InterventionError,
    InterventionParams,
    apply,
    apply_array,
    compose,
    identity_params,
    invert,
    load_params,
    params_from_dict,
    params_to_dict,
    save_params,
    with_strength,
)


def one(w, b, lam):
    return InterventionParams({"s": (np.array(w, float), np.array(b, float))}, lam)


def test_apply_examples():
    assert apply_array(one([5.0, 5.0], [1.0, 1.0], 0.0), "s", np.array([[3.0, -1.0]])).tolist() == [[3.0, -1.0]]
    assert apply_array(one([2.0], [1.0], 1.0), "s", np.array([[3.0]])).tolist() == [[7.0]]
    assert apply_array(one([2.0], [1.0], 0.5), "s", np.array([[3.0]])).tolist() == [[5.0]]


def test_apply_errors():
    p = one([1.0, 1.0], [0.0, 0.0], 1.0)
    with pytest.raises(InterventionError):
        apply(p, "t", np.ones((1, 2)))
    with pytest.raises(InterventionError):
        apply(p, "s", np.ones((1, 3)))
    with pytest.raises(InterventionError):
        one([1.0], [0.0], -0.5)
    with pytest.raises(InterventionError):
        one([np.nan], [0.0], 1.0)


def test_with_strength():
    rng = np.random.default_rng(0)
    w, b, a = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(5, 4))
    p = one(w, b, 1.0)
    q = with_strength(p, 0.25)
    assert p.strength == 1.0
    assert np.allclose(apply_array(q, "s", a), 0.75 * a + 0.25 * (w * a + b), atol=1e-15)
    assert np.array_equal(apply_array(with_strength(p, 0.0), "s", a), a)
    assert np.array_equal(apply_array(with_strength(p, 1.0), "s", a), apply_array(p, "s", a))
    with pytest.raises(InterventionError):
        with_strength(p, -1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0))
def test_linear_in_lambda(seed, lam):
    rng = np.random.default_rng(seed)
    w, b, a = rng.normal(size=3), rng.normal(size=3), rng.normal(size=(4, 3))
    p = one(w, b, lam)
    mixed = (1 - lam) * apply_array(with_strength(p, 0.0), "s", a) + lam * apply_array(with_strength(p, 1.0), "s", a)
    assert np.max(np.abs(apply_array(p, "s", a) - mixed)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0))
def test_inverse_round_trip(seed, lam):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.2, 2.0, size=3) * rng.choice([-1, 1], size=3)
    b, a = rng.normal(size=3), rng.normal(size=(4, 3))
    p = one(w, b, lam)
    if np.min(np.abs(lam * w + 1 - lam)) < 1e-3:
        return
    assert np.max(np.abs(invert(p, "s", apply_array(p, "s", a)) - a)) < 1e-9


def test_identity_params_and_compose(gen):
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 64))
    ident = identity_params(gen.sites)
    assert np.array_equal(apply_array(ident, "block0.norm", a), a)
    p = InterventionParams({s.name: (rng.normal(size=s.width), rng.normal(size=s.width)) for s in gen.sites}, 0.7)
    x = rng.normal(size=(5, 32))
    assert np.allclose(forward(gen, x, compose(ident, p)), forward(gen, x, p), atol=1e-12)


def test_serialization_round_trip(tmp_path, gen):
    ident = identity_params(gen.sites)
    back = params_from_dict(params_to_dict(ident))
    assert back.provenance == "identity" and back.strength == 1.0
    for k in ident.sites:
        assert np.array_equal(back.w(k), ident.w(k)) and np.array_equal(back.b(k), ident.b(k))
    rng = np.random.default_rng(2)
    p = InterventionParams({"block1.norm": (rng.normal(size=48), rng.normal(size=48))}, 0.3, "linact")
    save_params(p, tmp_path / "p.json")
    q = load_params(tmp_path / "p.json")
    assert q.strength == 0.3 and q.provenance == "linact"
    assert np.array_equal(q.w("block1.norm"), p.w("block1.norm"))


def test_gradients_wrt_w_b_lambda():
    rng = np.random.default_rng(3)
    w0, b0, a = rng.normal(size=3), rng.normal(size=3), rng.normal(size=(4, 3))
    up = rng.normal(size=(4, 3))
    w, b, lam = ad.leaf(w0), ad.leaf(b0), ad.leaf(0.4)
    ad.backward(ad.sum(apply(InterventionParams({"s": (w, b)}, lam), "s", a) * up))

    def f(w_, b_, l_):
        return float((((1 - l_) * a + l_ * (w_ * a + b_)) * up).sum())

    h = 1e-6
    for i in range(3):
        e = np.eye(3)[i] * h
        assert w.grad[i] == pytest.approx((f(w0 + e, b0, 0.4) - f(w0 - e, b0, 0.4)) / (2 * h), rel=1e-6)
        assert b.grad[i] == pytest.approx((f(w0, b0 + e, 0.4) - f(w0, b0 - e, 0.4)) / (2 * h), rel=1e-6)
    assert float(lam.grad) == pytest.approx((f(w0, b0, 0.4 + h) - f(w0, b0, 0.4 - h)) / (2 * h), rel=1e-6)
