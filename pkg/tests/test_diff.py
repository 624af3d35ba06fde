"""Reverse-mode gradients: hand-derived examples, finite-difference oracle, errors."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from mobidecomp import diff as ad
from mobidecomp.errors import CapabilityError, EvaluationError


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_square_at_three():
    value, g = ad.grad(lambda x: ad.sum(x * x), np.array([3.0]))
    assert value == 9.0
    np.testing.assert_array_equal(g, [6.0])


def test_product_plus_log():
    value, g = ad.grad(lambda v: v[0] * v[1] + ad.log(v[1]), np.array([2.0, 1.0]))
    assert value == pytest.approx(2.0, abs=1e-15)
    np.testing.assert_allclose(g, [1.0, 3.0], rtol=1e-15)


def test_numpy_ufuncs_dispatch_to_tape():
    value, g = ad.grad(lambda x: np.sum(np.exp(x) + np.log(x)), np.array([0.5, 2.0]))
    x = np.array([0.5, 2.0])
    assert value == pytest.approx(np.sum(np.exp(x) + np.log(x)))
    np.testing.assert_allclose(g, np.exp(x) + 1 / x, rtol=1e-14)


UNARY = {
    "exp": (ad.exp, np.exp),
    "log": (ad.log, np.log),
    "log1p": (ad.log1p, np.log1p),
    "sqrt": (ad.sqrt, np.sqrt),
    "square": (ad.square, np.square),
    "logistic": (ad.logistic, special.expit),
    "softplus": (ad.softplus, lambda x: np.logaddexp(0.0, x)),
    "log_logistic": (ad.log_logistic, special.log_expit),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_matches_finite_differences(name):
    op, ref = UNARY[name]
    x = np.array([0.3, 1.1, 2.7, 4.0])
    value, g = ad.grad(lambda v: ad.sum(op(v)), x)
    assert value == pytest.approx(np.sum(ref(x)), rel=1e-14)
    fd = central_difference(lambda v: np.sum(ref(v)), x)
    np.testing.assert_allclose(g, fd, rtol=1e-6)


@pytest.mark.parametrize(
    "fn",
    [
        lambda v: v[0] + v[1],
        lambda v: v[0] - v[1],
        lambda v: v[0] * v[1],
        lambda v: v[0] / v[1],
        lambda v: v[0] ** v[1],
        lambda v: v[0] ** 2.5,
        lambda v: -v[0] * 3.0 + 1.0 / v[1],
    ],
    ids=["add", "sub", "mul", "div", "power", "power_const", "mixed"],
)
def test_binary_primitive_matches_finite_differences(fn):
    x = np.array([1.7, 0.6])
    _, g = ad.grad(lambda v: fn(v), x)
    np.testing.assert_allclose(g, central_difference(fn, x), rtol=1e-6)


def test_gammainc_both_arguments_match_finite_differences():
    x = np.array([2.5, 0.7, 3.0])

    def f(v):
        return ad.sum(ad.gammainc(v[0], v[1:] * np.array([1.0, 2.0])))

    def f_ref(v):
        return np.sum(special.gammainc(v[0], v[1:] * np.array([1.0, 2.0])))

    value, g = ad.grad(f, x)
    assert value == pytest.approx(f_ref(x), rel=1e-14)
    np.testing.assert_allclose(g, central_difference(f_ref, x), rtol=1e-6)


def test_concatenate_getitem_reshape_and_broadcasting():
    x = np.arange(1.0, 7.0)

    def f(v):
        m = v.reshape(2, 3)
        row = m[0:1, :] * np.array([[1.0], [2.0]])  # broadcast against a column
        both = ad.concatenate([m, row], axis=0)
        return ad.sum(ad.sum(both, axis=1) ** 2.0)

    def f_ref(v):
        m = v.reshape(2, 3)
        both = np.concatenate([m, m[0:1, :] * np.array([[1.0], [2.0]])], axis=0)
        return np.sum(np.sum(both, axis=1) ** 2.0)

    value, g = ad.grad(f, x)
    assert value == pytest.approx(f_ref(x))
    np.testing.assert_allclose(g, central_difference(f_ref, x), rtol=1e-7)


def test_fused_primitive_vjp_is_used():
    def f(v):
        out = ad.primitive("sumsq", np.sum(v.value**2), (v, lambda g: 2.0 * g * v.value))
        return out

    value, g = ad.grad(f, np.array([1.0, -2.0]))
    assert value == 5.0
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_unused_input_has_zero_gradient():
    _, g = ad.grad(lambda v: ad.exp(v[0]), np.array([0.0, 5.0]))
    np.testing.assert_array_equal(g, [1.0, 0.0])


def test_unsupported_primitive_is_capability_error():
    with pytest.raises(CapabilityError, match="unsupported"):
        ad.grad(lambda v: np.sum(np.sin(v)), np.array([1.0]))


def test_branching_on_tracked_value_is_capability_error():
    with pytest.raises(CapabilityError):
        ad.grad(lambda v: v[0] if v[0] > 0 else -v[0], np.array([1.0]))


def test_non_scalar_output_is_capability_error():
    with pytest.raises(CapabilityError, match="scalar"):
        ad.grad(lambda v: v * 2.0, np.array([1.0, 2.0]))


def test_non_finite_intermediate_reports_node_index():
    with pytest.raises(EvaluationError) as info:
        ad.grad(lambda v: ad.sum(ad.log(v - 1.0)), np.array([1.0, 2.0]))
    assert info.value.node is not None
    assert "node" in str(info.value)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.2, 3.0), min_size=3, max_size=3),
    st.floats(-2.0, 2.0),
    st.floats(-2.0, 2.0),
)
def test_gradient_is_linear(x, a, b):
    x = np.array(x)

    def f(v):
        return ad.sum(ad.exp(v) * v[::-1])

    def g(v):
        return ad.sum(ad.log(v) ** 2.0) + v[0] * v[2]

    _, gf = ad.grad(f, x)
    _, gg = ad.grad(g, x)
    _, gs = ad.grad(lambda v: a * f(v) + b * g(v), x)
    np.testing.assert_allclose(gs, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_grad_is_bit_deterministic():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.5, 2.0, size=8)

    def f(v):
        return ad.sum(ad.softplus(v) * ad.log1p(v) / ad.sqrt(v)) + ad.sum(ad.gammainc(2.5, v))

    v1, g1 = ad.grad(f, x)
    v2, g2 = ad.grad(f, x.copy())
    assert v1 == v2
    assert g1.tobytes() == g2.tobytes()
