from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morephy import diffkit as dk
from morephy.diffkit import (
    AdamState,
    Jet2,
    NonFiniteError,
    ParamVector,
    Segment,
    Tensor,
    UnregisteredPrimitiveError,
    adam_step,
    apply,
    grad_params,
    input_jet2,
)


def fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-12))


# --- grad_params examples ---------------------------------------------------

def test_square_gradient():
    g = grad_params(lambda th: dk.sum_(dk.square(th)), np.array([3.0]))
    assert g[0] == pytest.approx(6.0, abs=1e-14)


def test_constant_has_zero_gradient():
    g = grad_params(lambda th: 4.0, np.array([1.0, 2.0]))
    assert np.all(g == 0)
    g = grad_params(lambda th: dk.sum_(th * 0.0) + 4.0, np.array([1.0, 2.0]))
    assert np.all(g == 0)


def test_product_gradient_matches_fd():
    f = lambda th: th[0] * th[1]
    x = np.array([2.0, 5.0])
    g = grad_params(f, x)
    np.testing.assert_allclose(g, [5.0, 2.0], rtol=1e-14)
    fd = fd_grad(lambda v: v[0] * v[1], x)
    assert rel_err(g, fd) < 1e-6


def test_grad_is_bitwise_deterministic():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20)
    W = rng.standard_normal((20, 7))

    def f(th):
        return dk.mean(dk.tanh(dk.matmul(th, W)))

    assert np.array_equal(grad_params(f, x), grad_params(f, x))


# --- every primitive against central differences ----------------------------

_UNARY = {
    "tanh": (dk.tanh, np.tanh, lambda r, n: r.standard_normal(n)),
    "sin": (dk.sin, np.sin, lambda r, n: r.standard_normal(n)),
    "cos": (dk.cos, np.cos, lambda r, n: r.standard_normal(n)),
    "exp": (dk.exp, np.exp, lambda r, n: r.standard_normal(n)),
    "log": (dk.log, np.log, lambda r, n: r.uniform(0.5, 3.0, n)),
    "square": (dk.square, np.square, lambda r, n: r.standard_normal(n)),
    "neg": (lambda t: -t, np.negative, lambda r, n: r.standard_normal(n)),
    "gamma": (dk.gamma, np.vectorize(math.gamma), lambda r, n: r.uniform(0.6, 3.5, n)),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_primitive_gradients(name):
    op, ref, draw = _UNARY[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    tol = 1e-6 if name != "gamma" else 1e-5  # gamma's own derivative is a difference quotient
    worst = 0.0
    for _ in range(100):
        x = draw(rng, 3)
        w = rng.standard_normal(3)
        g = grad_params(lambda th: dk.sum_(op(th) * w), x)
        fd = fd_grad(lambda v: float(np.sum(ref(v) * w)), x)
        worst = max(worst, rel_err(g, fd))
    assert worst < tol


_BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
}


@pytest.mark.parametrize("name", sorted(_BINARY))
def test_binary_primitive_gradients_with_broadcast(name):
    op = _BINARY[name]
    rng = np.random.default_rng(len(name))
    worst = 0.0
    for _ in range(100):
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 2.0, 4)
        w = rng.standard_normal((3, 4))
        x = np.concatenate([a.ravel(), b])

        def f(th):
            return dk.sum_(op(th[:12].reshape(3, 4), th[12:]) * w)

        g = grad_params(f, x)
        fd = fd_grad(lambda v: float(np.sum(op(v[:12].reshape(3, 4), v[12:]) * w)), x)
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-6


def test_structural_primitive_gradients():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(12)
        B = rng.standard_normal((4, 5))
        v = rng.standard_normal(3)
        idx = np.array([0, 2, 2, 5])

        def fnp(th):
            A = th.reshape(3, 4)
            s, m, fancy, vec = (A @ B).sum(axis=0), A.T.mean(axis=1), th[idx], v @ A
            return float(s @ s + m @ m + fancy @ fancy + vec @ vec)

        def fdk(th):
            A = th.reshape(3, 4)
            M = dk.matmul(A, B)
            s = dk.sum_(M, axis=0)
            m = dk.mean(A.T, axis=1)
            fancy = th[idx]
            vec = dk.matmul(v, A)
            return dk.sum_(s * s) + dk.sum_(m * m) + dk.sum_(fancy * fancy) + dk.sum_(vec * vec)

        g = grad_params(fdk, x)
        fd = fd_grad(fnp, x)
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-6


def test_stack_primitives_match_fd():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        s0 = rng.standard_normal((4, 3, 2))
        W = rng.standard_normal((2, 3))
        b = rng.standard_normal(3)
        x = np.concatenate([s0.ravel(), W.ravel(), b])
        w = rng.standard_normal((4, 3, 3))

        def f(th):
            s = th[:24].reshape(4, 3, 2)
            h = dk.stack_affine(s, th[24:30].reshape(2, 3), th[30:])
            return dk.sum_(dk.stack_tanh(h, 2, (0,)) * w)

        def fnp(th):
            s = th[:24].reshape(4, 3, 2)
            h = dk.stack_affine(s, th[24:30].reshape(2, 3), th[30:])
            return float(np.sum(dk.stack_tanh(h, 2, (0,)) * w))

        worst = max(worst, rel_err(grad_params(f, x), fd_grad(fnp, x)))
    assert worst < 1e-6


def test_stack_tanh_equals_jet_rules():
    rng = np.random.default_rng(6)
    v, d, e = rng.standard_normal((3, 5, 4))
    out = dk.stack_tanh(np.stack([v, d, e]), 1, (0,))
    ref = Jet2(v, d, e).tanh()
    np.testing.assert_allclose(out[0], ref.value, rtol=1e-14)
    np.testing.assert_allclose(out[1], ref.d1, rtol=1e-14)
    np.testing.assert_allclose(out[2], ref.d2, rtol=1e-13, atol=1e-15)


# --- error paths -----------------------------------------------------------

def test_unregistered_primitive_fails_at_construction():
    with pytest.raises(UnregisteredPrimitiveError):
        apply("no_such_op", Tensor(np.ones(2)))


def test_non_finite_names_primitive():
    with pytest.raises(NonFiniteError) as info, np.errstate(invalid="ignore"):
        grad_params(lambda th: dk.sum_(dk.log(th)), np.array([-1.0]))
    assert info.value.primitive == "log"


# --- jets ------------------------------------------------------------------

def test_jet_monomial():
    j = input_jet2(lambda x: x * x, 2.0)
    assert (j.value, j.d1, j.d2) == (4.0, 4.0, 2.0)


def test_jet_sine_at_origin():
    j = input_jet2(lambda x: x.sin(), 0.0)
    assert (j.value, j.d1, j.d2) == (0.0, 1.0, 0.0)


def test_jet_tanh_matches_five_point_fd():
    f = lambda x: math.tanh(2 * x)
    x0, h = 0.3, 1e-4
    d1 = (-f(x0 + 2 * h) + 8 * f(x0 + h) - 8 * f(x0 - h) + f(x0 - 2 * h)) / (12 * h)
    d2 = (-f(x0 + 2 * h) + 16 * f(x0 + h) - 30 * f(x0) + 16 * f(x0 - h) - f(x0 - 2 * h)) / (12 * h * h)
    j = input_jet2(lambda x: (2.0 * x).tanh(), x0)
    assert j.value == pytest.approx(f(x0), rel=1e-14)
    assert abs(j.d1 - d1) / abs(d1) < 1e-5
    assert abs(j.d2 - d2) / abs(d2) < 1e-5


_OPS = ["tanh", "sin", "cos", "exp", "affine", "mul_self", "add_const"]


def _build_chain(ops, coefs):
    def jet_chain(x):
        for op, (a, b) in zip(ops, coefs):
            if op == "affine":
                x = x * a + b
            elif op == "mul_self":
                x = x * (x * 0.5 + b)
            elif op == "add_const":
                x = x + b
            elif op == "exp":
                x = (x * 0.3).exp()
            else:
                x = getattr(x, op)()
        return x

    def float_chain(x):
        for op, (a, b) in zip(ops, coefs):
            if op == "affine":
                x = x * a + b
            elif op == "mul_self":
                x = x * (x * 0.5 + b)
            elif op == "add_const":
                x = x + b
            elif op == "exp":
                x = math.exp(x * 0.3)
            else:
                x = getattr(math, op)(x)
        return x

    return jet_chain, float_chain


@settings(max_examples=100, deadline=None)
@given(
    ops=st.lists(st.sampled_from(_OPS), min_size=1, max_size=8),
    seed=st.integers(0, 2**31 - 1),
    x0=st.floats(-1.0, 1.0),
)
def test_jet_compositions_match_nested_fd(ops, seed, x0):
    rng = np.random.default_rng(seed)
    coefs = [tuple(rng.uniform(-1, 1, 2)) for _ in ops]
    jet_chain, f = _build_chain(ops, coefs)
    j = input_jet2(jet_chain, x0)
    h = 1e-3
    d1 = (-f(x0 + 2 * h) + 8 * f(x0 + h) - 8 * f(x0 - h) + f(x0 - 2 * h)) / (12 * h)
    d2 = (-f(x0 + 2 * h) + 16 * f(x0 + h) - 30 * f(x0) + 16 * f(x0 - h) - f(x0 - 2 * h)) / (12 * h * h)
    assert j.value == pytest.approx(f(x0), rel=1e-12, abs=1e-12)
    assert abs(j.d1 - d1) <= 1e-4 * max(abs(d1), 1e-2)
    assert abs(j.d2 - d2) <= 1e-4 * max(abs(d2), 1e-1)


def test_jet_components_can_be_tensors():
    # d/dw of the jet's d1 for f(x) = tanh(w x) at x0: d1 = w sech^2(w x0)
    x0 = 0.4

    def loss(th):
        j = Jet2(np.array(x0), np.array(1.0), np.array(0.0)) * th[0]
        return dk.sum_(j.tanh().d1)

    w = np.array([1.3])
    g = grad_params(loss, w)
    fd = fd_grad(lambda v: v[0] * (1 - math.tanh(v[0] * x0) ** 2), w)
    assert rel_err(g, fd) < 1e-6


# --- ParamVector -----------------------------------------------------------

def test_param_vector_layout_checks():
    segs = (Segment("a", 0, (2,)), Segment("b", 2, (1, 3)))
    pv = ParamVector(np.arange(5.0), segs)
    np.testing.assert_array_equal(pv.view(pv.values, "b"), [[2.0, 3.0, 4.0]])
    with pytest.raises(ValueError):
        ParamVector(np.arange(6.0), segs)
    with pytest.raises(ValueError):
        ParamVector(np.arange(5.0), (Segment("a", 0, (2,)), Segment("b", 3, (1, 2))))
    with pytest.raises(ValueError):
        ParamVector(np.array([1.0, np.nan]))


# --- Adam ------------------------------------------------------------------

def test_adam_first_step():
    st0 = AdamState.zeros(1, lr=5e-4)
    st1, pv = adam_step(st0, ParamVector(np.zeros(1)), np.ones(1))
    assert pv.values[0] == pytest.approx(-5e-4, rel=1e-6)
    assert st1.step_count == 1


def test_adam_zero_gradient_leaves_params():
    st0 = AdamState.zeros(3)
    _, pv = adam_step(st0, ParamVector(np.arange(3.0)), np.zeros(3))
    np.testing.assert_array_equal(pv.values, np.arange(3.0))


def test_adam_sign_flip_moves_back():
    st0 = AdamState.zeros(1)
    p0 = ParamVector(np.zeros(1))
    s1, p1 = adam_step(st0, p0, np.ones(1))
    _, same = adam_step(s1, p1, np.ones(1))
    _, back = adam_step(s1, p1, -np.ones(1))
    assert same.values[0] < p1.values[0]
    assert back.values[0] > p1.values[0]


def test_adam_length_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(2), ParamVector(np.zeros(2)), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.integers(1, 5))
def test_adam_state_invariants(g, steps):
    g = np.array(g)
    state = AdamState.zeros(g.size)
    pv = ParamVector(np.zeros(g.size))
    for k in range(steps):
        state, pv = adam_step(state, pv, g)
        assert state.step_count == k + 1
        assert np.all(state.v >= 0)
