import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcctower.logdomain import (
    BracketError,
    ExponentField,
    LogGrid,
    SampledRadialFunction,
    dilate,
    dirichlet_energy,
    dirichlet_energy_with_error,
    integrate_exp,
    log_integrate_exp,
    logexpm1,
    make_uniform_grid,
    orlicz_exp_l2_norm,
    refined_grid,
)
from mcctower.closed_sets import SignedClosedSet
from mcctower.towers import build_tower, sample

from conftest import SQRT_2PI, moser


# -- grids -------------------------------------------------------------------------


def test_uniform_grid_three_nodes():
    assert np.array_equal(make_uniform_grid(1.0, 3).nodes, [0.0, 0.5, 1.0])


def test_uniform_grid_spacing():
    g = make_uniform_grid(10.0, 11)
    assert np.allclose(np.diff(g.nodes), 1.0)
    g = make_uniform_grid(100.0, 10**5)
    assert len(g) == 10**5
    assert np.diff(g.nodes)[0] == pytest.approx(100.0 / (10**5 - 1))


@pytest.mark.parametrize("t_max,n", [(0.0, 10), (-1.0, 10), (math.inf, 10), (1.0, 2), (1.0, 3.5)])
def test_uniform_grid_rejects(t_max, n):
    with pytest.raises(ValueError):
        make_uniform_grid(t_max, n)


def test_loggrid_validation():
    with pytest.raises(ValueError):
        LogGrid([0.0, 1.0])
    with pytest.raises(ValueError):
        LogGrid([0.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        LogGrid([-1.0, 0.0, 1.0])


def test_with_points_inserts_exact_nodes():
    g = make_uniform_grid(10.0, 101).with_points([math.pi, 5.0])
    assert math.pi in g.nodes
    assert np.count_nonzero(g.nodes == 5.0) == 1
    assert g.contains_nodes([math.pi, 5.0])
    assert not g.contains_nodes([math.e])


@given(st.lists(st.floats(0.01, 9.99), min_size=1, max_size=5),
       st.floats(1e-7, 1e-3))
@settings(max_examples=30, deadline=None)
def test_refined_grid_contains_centers(centers, h):
    g = refined_grid(10.0, 201, centers, h_min=h)
    assert g.contains_nodes(centers)
    assert np.all(np.diff(g.nodes) > 0)
    assert g.t_min == 0.0 and g.t_max == 10.0


# -- sampled functions -----------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    g = make_uniform_grid(3.0, 31)
    u = SampledRadialFunction(g, np.sin(g.nodes) / 7.0)
    u.to_csv(tmp_path / "u.csv")
    back = SampledRadialFunction.from_csv(tmp_path / "u.csv")
    assert np.array_equal(back.t, u.t)
    assert np.array_equal(back.values, u.values)


def test_samples_must_be_finite():
    g = make_uniform_grid(1.0, 3)
    with pytest.raises(ValueError):
        SampledRadialFunction(g, [0.0, np.nan, 1.0])
    with pytest.raises(ValueError):
        SampledRadialFunction(g, [0.0, 1.0])


def test_evaluation_holds_last_value():
    g = make_uniform_grid(2.0, 21)
    u = SampledRadialFunction(g, np.minimum(g.nodes, 1.0))
    assert u(5.0) == pytest.approx(1.0)
    assert u(0.5) == pytest.approx(0.5)


# -- Dirichlet energy --------------------------------------------------------------------


def test_energy_of_zero():
    assert dirichlet_energy(SampledRadialFunction.zeros(make_uniform_grid(1.0, 11))) == 0.0


def test_moser_energy_is_one():
    tw = moser(1.0)
    u = sample(tw, tw.default_grid())
    assert abs(dirichlet_energy(u) - 1.0) <= 1e-6


def test_interval_energy_is_three_halves(interval_075):
    tw = build_tower(interval_075)
    e, err = dirichlet_energy_with_error(sample(tw, tw.default_grid()))
    assert abs(e - 1.5) <= 1e-6
    assert err <= 1e-6


def test_energy_against_mpmath_on_smooth_function():
    # U = sin(t) e^{-t} on [0, 20]: 2 pi int U'^2 by mpmath
    g = make_uniform_grid(20.0, 2**16 + 1)
    u = SampledRadialFunction(g, np.sin(g.nodes) * np.exp(-g.nodes))
    ref = 2 * mpmath.pi * mpmath.quad(
        lambda t: ((mpmath.cos(t) - mpmath.sin(t)) * mpmath.exp(-t)) ** 2, [0, 20])
    assert dirichlet_energy(u) == pytest.approx(float(ref), rel=1e-6)


@given(st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
@settings(max_examples=25, deadline=None)
def test_energy_is_quadratic(c):
    g = make_uniform_grid(5.0, 101)
    u = SampledRadialFunction(g, np.sqrt(g.nodes))
    assert dirichlet_energy(u * c) == pytest.approx(c * c * dirichlet_energy(u), rel=1e-12)


# -- exponential integrals ---------------------------------------------------------------


def test_integrate_exp_of_one():
    g = make_uniform_grid(1.0, 11)
    assert integrate_exp(ExponentField(g, np.zeros(11))) == pytest.approx(1.0, abs=1e-14)


def test_integrate_exp_steep_decay():
    # int_0^inf e^{-700 t} dt on a grid resolving the decay
    g = refined_grid(2.0, 4001, [0.0], h_min=1e-6, ratio=1.01)
    val = integrate_exp(ExponentField(g, -700.0 * g.nodes))
    assert abs(val - 1.0 / 700.0) <= 1e-6


def test_integrate_exp_huge_peak_against_mpmath():
    t = np.linspace(0.0, 1.0, 10)
    lv = -np.abs(t - t[4]) * 50.0
    lv[4] = 1e5
    lv[3], lv[5] = 1e5 - 3.0, 1e5 - 7.0
    g = LogGrid(t)
    log_val, sign = log_integrate_exp(ExponentField(g, lv))
    with mpmath.workdps(40):
        vals = [mpmath.e ** mpmath.mpf(float(x)) for x in lv]
        ref = sum((vals[i] + vals[i + 1]) / 2 * (mpmath.mpf(float(t[i + 1])) - mpmath.mpf(float(t[i])))
                  for i in range(9))
        ref_log = float(mpmath.log(ref))
    assert sign == 1.0
    assert log_val == pytest.approx(ref_log, rel=1e-14)
    with pytest.raises(OverflowError):
        integrate_exp(ExponentField(g, lv))


@given(st.floats(-300, 300))
@settings(max_examples=25, deadline=None)
def test_integrate_exp_shift(c):
    g = make_uniform_grid(3.0, 301)
    lv = np.cos(g.nodes) * 4.0
    a, _ = log_integrate_exp(ExponentField(g, lv))
    b, _ = log_integrate_exp(ExponentField(g, lv + c))
    assert b == pytest.approx(a + c, abs=1e-9)


def test_logexpm1():
    x = np.array([1e-8, 0.5, 10.0, 40.0, 1e4])
    ref = [float(mpmath.log(mpmath.expm1(mpmath.mpf(v)))) for v in x]
    assert np.allclose(logexpm1(x), ref, rtol=1e-12)


# -- dilation ------------------------------------------------------------------------


def test_dilate_identity():
    tw = moser(1.0)
    u = sample(tw, tw.default_grid(1001))
    assert dilate(u, 1.0) is u


def test_dilate_moser_halves_depth():
    tw = moser(1.0)
    g = make_uniform_grid(12.0, 2**16 + 1).with_points([0.5, 1.0])
    d = dilate(SampledRadialFunction.from_callable(g, tw), 2.0)
    ref = sample(moser(0.5), g)
    assert np.max(np.abs(d.values - ref.values)) <= 1e-6


def test_dilate_interpolated_samples_close_to_exact():
    tw = moser(1.0)
    g = make_uniform_grid(12.0, 2**16 + 1).with_points([0.5, 1.0])
    u = SampledRadialFunction(g, tw(g.nodes))  # no exact callable
    d = dilate(u, 2.0)
    assert np.max(np.abs(d.values - moser(0.5)(g.nodes))) <= 1e-6


@given(st.sampled_from([2.0, 10.0, 100.0]), st.sampled_from([2.0, 10.0, 100.0]))
@settings(max_examples=9, deadline=None)
def test_dilation_group_law(s, sigma):
    tw = build_tower(SignedClosedSet.from_points([30.0, 5.0, 1.0], [1, -1, 1]))
    g = make_uniform_grid(80.0, 4001)
    u = SampledRadialFunction.from_callable(g, tw)
    lhs = dilate(dilate(u, sigma), s)
    rhs = dilate(u, s * sigma)
    assert np.max(np.abs(lhs.values - rhs.values)) <= 1e-12


@pytest.mark.parametrize("s", [0.0, -1.0, math.inf, math.nan])
def test_dilate_rejects(s):
    u = SampledRadialFunction.zeros(make_uniform_grid(1.0, 5))
    with pytest.raises(ValueError):
        dilate(u, s)


# -- Orlicz norm ---------------------------------------------------------------------


def test_orlicz_zero():
    assert orlicz_exp_l2_norm(SampledRadialFunction.zeros(make_uniform_grid(1.0, 11))) == 0.0


def test_orlicz_constant_one():
    u = SampledRadialFunction(make_uniform_grid(30.0, 300001), np.ones(300001))
    assert orlicz_exp_l2_norm(u) == pytest.approx(1.0 / math.sqrt(math.log(1.0 + 1.0 / math.pi)), rel=1e-7)


def test_orlicz_moser_against_root_oracle():
    # int_B (e^{(u/lam)^2} - 1) = 2 pi int (e^{U^2/lam^2} - 1) e^{-2t} dt for U = min(t,1)/sqrt(2 pi)
    def modular(lam):
        f = lambda t: (mpmath.exp((min(t, 1) / SQRT_2PI / lam) ** 2) - 1) * mpmath.exp(-2 * t)
        return 2 * mpmath.pi * mpmath.quad(f, [0, 1, mpmath.inf]) - 1

    ref = float(mpmath.findroot(modular, 0.3))
    tw = moser(1.0)
    u = sample(tw, tw.default_grid(2**16 + 1))
    assert orlicz_exp_l2_norm(u) == pytest.approx(ref, rel=1e-6)


@given(st.floats(0.1, 10.0))
@settings(max_examples=15, deadline=None)
def test_orlicz_homogeneous(c):
    tw = moser(1.0)
    u = sample(tw, tw.default_grid(4097))
    assert orlicz_exp_l2_norm(u * c) == pytest.approx(c * orlicz_exp_l2_norm(u), rel=1e-7)


def test_orlicz_bracket_error():
    u = SampledRadialFunction(make_uniform_grid(1.0, 11), np.ones(11) * 1e6)
    with pytest.raises(BracketError):
        orlicz_exp_l2_norm(u)
