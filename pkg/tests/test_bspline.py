"""Spline primitives: knots, basis evaluation, colex ordering, Marsden identity."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from surriga.bspline import (
    NurbsWeights,
    bezier_knots,
    cardinal_midpoints,
    collocation_solve,
    colex_index,
    colex_multi_index,
    eval_basis,
    eval_nurbs,
    evaluation_matrix,
    make_open_uniform_knots,
    make_tensor_space,
    marsden_check,
    refine_uniform,
)


def test_open_uniform_knots_layout():
    kv = make_open_uniform_knots(2, 21)
    assert len(kv.knots_exact) == 24
    assert kv.h_exact == Fraction(1, 19)
    assert kv.knots_exact[:4] == (Fraction(0),) * 3 + (Fraction(1, 19),)
    assert kv.knots_exact[-3:] == (Fraction(1),) * 3


def test_knot_count_floor():
    with pytest.raises(ValueError):
        make_open_uniform_knots(2, 4)
    make_open_uniform_knots(2, 5)


def test_cardinal_midpoints():
    kv = make_open_uniform_knots(2, 21)
    lat = cardinal_midpoints(kv)
    assert lat.count == 17
    assert lat.indices[0] == 3 and lat.indices[-1] == 19
    assert abs(lat.midpoints[0] - 1.5 / 19) < 1e-16
    assert lat.midpoint_exact(3) == Fraction(3, 2) * Fraction(1, 19)
    assert np.allclose(np.diff(lat.midpoints), kv.h)


@given(p=st.integers(1, 4), extra=st.integers(0, 9), data=st.data())
@settings(max_examples=60, deadline=None)
def test_cardinal_midpoint_ratio(p, extra, data):
    # a cardinal basis function is centered on the midpoint (k - 1/2) h
    kv = make_open_uniform_knots(p, 2 * p + 1 + extra)
    lat = cardinal_midpoints(kv)
    k = data.draw(st.integers(int(lat.indices[0]), int(lat.indices[-1])))
    assert lat.midpoint_exact(k) == (k - Fraction(p + 1, 2)) * kv.h_exact


def test_partition_of_unity_and_scipy_crosscheck():
    kv = make_open_uniform_knots(2, 21)
    T = kv.knots
    for x in [0.0, 0.013, 0.5, 0.77, 1.0]:
        span, ders = eval_basis(kv, x, 2)
        assert abs(ders[0].sum() - 1) < 1e-14
        assert abs(ders[1].sum()) < 1e-10
        assert abs(ders[2].sum()) < 1e-8
        for r in range(kv.p + 1):
            j = span - kv.p + r
            c = np.zeros(kv.m)
            c[j] = 1.0
            spl = BSpline(T, c, kv.p, extrapolate=True)
            assert abs(spl(x) - ders[0, r]) < 1e-12
            assert abs(spl.derivative()(x) - ders[1, r]) < 1e-9


@given(p=st.integers(1, 4), extra=st.integers(0, 6),
       x=st.floats(0.0, 1.0, allow_nan=False))
@settings(max_examples=80, deadline=None)
def test_partition_of_unity_property(p, extra, x):
    kv = make_open_uniform_knots(p, 2 * p + 1 + extra)
    _, ders = eval_basis(kv, x, min(p, 1))
    assert abs(ders[0].sum() - 1) < 1e-13
    if p >= 1:
        assert abs(ders[-1].sum()) < 1e-9


def test_interior_translation_invariance():
    # cardinal basis functions are shifted copies: values on one element of
    # the support of index k match index k+1 one element later
    kv = make_open_uniform_knots(3, 24)
    h = kv.h
    xs = np.linspace(8 * h, 9 * h, 11)
    for x, y in zip(xs, xs + h):
        sx, dx = eval_basis(kv, float(x), 0)
        sy, dy = eval_basis(kv, float(y), 0)
        assert sy == sx + 1
        assert np.max(np.abs(dy[0] - dx[0])) < 1e-13


def test_colex_contract():
    assert colex_index((1, 1), 21) == 1
    assert colex_index((3, 2), 21) == 24
    assert colex_index((21, 21), 21) == 441
    assert colex_multi_index(24, 21, 2) == (3, 2)


@given(n=st.integers(1, 3), data=st.data())
@settings(max_examples=60, deadline=None)
def test_colex_round_trip(n, data):
    ms = tuple(data.draw(st.integers(1, 9)) for _ in range(n))
    total = int(np.prod(ms))
    i = data.draw(st.integers(1, total))
    multi = colex_multi_index(i, ms, n)
    assert all(1 <= t <= m for t, m in zip(multi, ms))
    assert colex_index(multi, ms) == i


@given(p=st.integers(1, 4), x=st.floats(0.0, 1.0), y=st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_marsden_identity_property(p, x, y):
    kv = make_open_uniform_knots(p, 3 * p + 2)
    assert marsden_check(kv, x, y) < 1e-12


def test_refinement_reproduces_polynomials():
    c = np.array([0.0, 0.0, 1.0])
    kv9, c9 = refine_uniform(bezier_knots(2), 2, c, 9)
    assert kv9.m == 9
    for x in [0.1, 0.33, 0.9]:
        span, ders = eval_basis(kv9, x, 0)
        val = sum(ders[0, r] * c9[span - 2 + r] for r in range(3))
        assert abs(val - x * x) < 1e-14


def test_nurbs_partition_of_unity():
    rng = np.random.default_rng(3)
    sp2 = make_tensor_space(2, 8, 2)
    w = NurbsWeights(weights=rng.uniform(0.5, 2.0, sp2.N))
    for pt in rng.random((5, 2)):
        nv = eval_nurbs(sp2, w, pt, 2)
        assert abs(nv.value.sum() - 1) < 1e-13
        assert np.all(np.abs(nv.grad.sum(axis=(1, 2))) < 1e-9)
        assert np.all(np.abs(nv.hess.sum(axis=(2, 3))) < 1e-7)


def test_nurbs_derivatives_match_finite_differences():
    rng = np.random.default_rng(5)
    sp2 = make_tensor_space(2, 8, 2)
    w = NurbsWeights(weights=rng.uniform(0.5, 2.0, sp2.N))
    pt = np.array([0.43, 0.61])
    eps = 1e-6
    nv = eval_nurbs(sp2, w, pt, 2)
    for a in range(2):
        e = np.zeros(2)
        e[a] = eps
        vp = eval_nurbs(sp2, w, pt + e, 1)
        vm = eval_nurbs(sp2, w, pt - e, 1)
        assert vp.first == nv.first == vm.first
        fd = (vp.value - vm.value) / (2 * eps)
        assert np.max(np.abs(fd - nv.grad[a])) < 1e-7
        for b in range(2):
            fd2 = (vp.grad[b] - vm.grad[b]) / (2 * eps)
            assert np.max(np.abs(fd2 - nv.hess[a, b])) < 1e-5


def test_collocation_round_trip_at_greville():
    rng = np.random.default_rng(11)
    kv = make_open_uniform_knots(2, 21)
    g = kv.greville()
    E = evaluation_matrix(kv.knots, kv.p, g)
    coef = rng.standard_normal(kv.m)
    back = collocation_solve(kv.knots, kv.p, g, E @ coef)
    assert np.max(np.abs(back - coef)) < 1e-10
