import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from mcctower.closed_sets import SignedClosedSet
from mcctower.critical_sequences import (
    BlowUp,
    CorrectionField,
    PolynomialBump,
    ScaleTooSmallError,
    SequenceSpec,
    Window,
    assemble,
    blend_gradient_mass,
    compute_M_constants,
    correction_plan,
    flux_integral,
    generate_sequence,
    glue_corrections,
    multibump,
    point_equation,
    psi_field,
    side_rates,
    smoothstep,
    solve_interval_correction,
    solve_point_correction,
    weak_convergence_check,
    weak_target,
)
from mcctower.logdomain import LogGrid, SampledRadialFunction, dirichlet_energy, make_uniform_grid
from mcctower.tm_functional import MODEL, SQRT_DAMPED
from mcctower.towers import build_tower, design_level, energy_closed_form, flux_jumps, kink_fluxes

from conftest import SQRT_2PI, moser

FOUR_PI, EIGHT_PI = 4 * math.pi, 8 * math.pi


def bisect_point(mu, s, M):
    """Root of s(8 pi mu v + 4 pi v^2) + log(sqrt(s)(mu + v)) + log(s)/2 - log M by bisection."""
    f = lambda v: s * (EIGHT_PI * mu * v + FOUR_PI * v * v) + math.log(math.sqrt(s) * (mu + v)) \
        + 0.5 * math.log(s) - math.log(M)
    lo, hi = -mu * (1 - 1e-12), 1.0
    while f(hi) < 0:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def point_grid(t_max=3.0):
    return make_uniform_grid(t_max, 601).with_points([1.0])


# -- windows and smoothstep ----------------------------------------------------------


def test_smoothstep_ends():
    assert smoothstep(0.0) == 0.0 and smoothstep(1.0) == 1.0 and smoothstep(0.5) == 0.5
    assert smoothstep(-3.0) == 0.0 and smoothstep(7.0) == 1.0


def test_window_weight_and_order():
    w = Window(1.0, 2.0, 3.0, 4.0)
    assert np.allclose(w.weight([0.5, 1.5, 2.5, 3.5, 4.5]), [0.0, 0.5, 1.0, 0.5, 0.0])
    with pytest.raises(ValueError):
        Window(2.0, 1.0, 3.0, 4.0)


def test_sharp_windows_meeting_do_not_overlap():
    a, b = Window(0.0, 0.0, 1.0, 1.0), Window(1.0, 1.0, 2.0, 2.0)
    t = np.linspace(0.0, 2.0, 201)
    total = a.weight(t) + b.weight(t)
    assert np.all(total[t < 2.0] == 1.0)


# -- M constants ---------------------------------------------------------------------


def test_singleton_M():
    tw = moser(1.0)
    assert side_rates(tw, 1.0) == pytest.approx((2.0, 2.0))
    (M,) = compute_M_constants(tw)
    assert M == pytest.approx(1.0 / SQRT_2PI)


def test_two_point_M_closed_form(two_points):
    tw = build_tower(two_points)
    sigma = 2.0
    interior = 2 * (sigma - 1) / (sigma + 1)
    (t4, q4), (t1, q1) = flux_jumps(tw)
    M4, M1 = compute_M_constants(tw)
    assert side_rates(tw, 4.0) == pytest.approx((interior, 2.0))
    assert side_rates(tw, 1.0) == pytest.approx((2.0, interior))
    assert M4 == pytest.approx(q4 / (1 / interior + 1 / 2))
    assert M1 == pytest.approx(q1 / (1 / 2 + 1 / interior))
    assert M4 > 0 and M1 > 0


@pytest.mark.parametrize("cs", [SignedClosedSet.from_points([1.0]), SignedClosedSet.from_points([4.0, 1.0]),
                                design_level(3, 2.0)])
def test_M_gives_laplace_mass_q(cs):
    # s M int exp(s (4 pi mu^2 - 2 tau)) dtau -> q at each set point
    tw = build_tower(cs)
    s = 1e5
    for (t, q), M in zip(sorted(kink_fluxes(tw), key=lambda x: -x[0]), compute_M_constants(tw)):
        f = lambda x: s * M * math.exp(s * (FOUR_PI * float(tw(x)) ** 2 - 2 * x) - s * (FOUR_PI * float(tw(t)) ** 2 - 2 * t))
        reach = 60.0 / s
        mass = quad(f, t - reach, t, epsabs=0, epsrel=1e-10)[0] + quad(f, t, t + reach, epsabs=0, epsrel=1e-10)[0]
        assert mass == pytest.approx(q, rel=1e-4)


def test_M_scales_with_the_tower_flux():
    # scaling every t by lam scales q by lam^-1/2 and leaves the rates alone
    base = compute_M_constants(build_tower(design_level(3, 2.0)))
    for lam in (2.0, 10.0):
        scaled = compute_M_constants(build_tower(design_level(3, 2.0, t_outer=lam)))
        assert np.allclose(scaled, np.array(base) / math.sqrt(lam), rtol=1e-12)


def test_M_rejects_intervals(interval_075):
    with pytest.raises(ValueError):
        compute_M_constants(build_tower(interval_075))


# -- point corrections ---------------------------------------------------------------


@pytest.mark.parametrize("s", [1e2, 1e4, 1e6])
def test_point_correction_residual_and_bisection(s):
    tw = moser(1.0)
    (M,) = compute_M_constants(tw)
    grid = point_grid()
    cf = solve_point_correction(tw, MODEL, s, M, Window(0.5, 0.5, 3.0, 3.0), grid)
    assert cf.all_converged and cf.max_residual < 1e-12
    phi = point_equation(tw, MODEL, s, M, grid.nodes)
    live = grid.nodes >= 0.5
    assert np.max(np.abs(phi(cf.v)[live])) < 1e-12
    for k in np.nonzero(live)[0][::60]:
        mu = float(tw(grid.nodes[k]))
        assert cf.v[k] == pytest.approx(bisect_point(mu, s, M), abs=1e-13)


def test_psi_identity():
    tw = build_tower(design_level(3, 2.0))
    s = 1e4
    grid = make_uniform_grid(100.0, 4001).with_points(tw.kinks)
    for t, M in zip((81.0, 9.0, 1.0), compute_M_constants(tw)):
        win = Window(t - 0.5, t - 0.5, t + 0.5, t + 0.5)
        cf = solve_point_correction(tw, MODEL, s, M, win, grid)
        m = (grid.nodes >= t - 0.5) & (grid.nodes <= t + 0.5)
        psi = psi_field(cf, tw, MODEL)[m]
        assert np.allclose(np.exp(s * psi - math.log(M * s)), 1.0, rtol=0, atol=1e-10)


def test_point_correction_decreasing_in_s():
    tw = moser(1.0)
    (M,) = compute_M_constants(tw)
    grid = point_grid()
    k = int(np.searchsorted(grid.nodes, 1.0))
    vs = []
    for s in (1e3, 1e4, 1e5):
        cf = solve_point_correction(tw, MODEL, s, M, Window(0.5, 0.5, 3.0, 3.0), grid)
        vs.append(abs(cf.v[k]))
        # O(log s / s): at the point, 8 pi mu s v ~ log M - log s - log mu  (g(t) = t)
        mu = float(tw(1.0))
        lead = (math.log(M) - math.log(s) - math.log(mu)) / (EIGHT_PI * mu * s)
        assert cf.v[k] == pytest.approx(lead, rel=0.05)
    assert vs[0] > vs[1] > vs[2]


def test_point_correction_damped_nonlinearity():
    tw = moser(1.0)
    (M,) = compute_M_constants(tw)
    cf = solve_point_correction(tw, SQRT_DAMPED, 1e4, M, Window(0.5, 0.5, 3.0, 3.0), point_grid())
    assert cf.all_converged and cf.max_residual < 1e-12


def test_point_correction_rejects_bad_inputs():
    tw = moser(1.0)
    with pytest.raises(ValueError):
        solve_point_correction(tw, MODEL, 1e3, 0.0, Window(0.5, 0.5, 3.0, 3.0), point_grid())
    with pytest.raises(ValueError):
        solve_point_correction(tw, MODEL, 1e3, 1.0, Window.full(), point_grid())


# -- interval corrections ------------------------------------------------------------


def test_interval_correction_residual(interval_075):
    tw = build_tower(interval_075)
    for s in (1e2, 1e4, 1e6):
        cf = solve_interval_correction(tw, MODEL, s)
        assert cf.all_converged and cf.max_residual < 1e-12


def test_interval_correction_sup_decreasing(interval_075):
    tw = build_tower(interval_075)
    sups = [solve_interval_correction(tw, MODEL, s).sup_norm() for s in (1e3, 1e4, 1e5, 1e6)]
    assert all(b < a for a, b in zip(sups, sups[1:]))
    # O(log s / s)
    ratios = [v * s / math.log(s) for v, s in zip(sups, (1e3, 1e4, 1e5, 1e6))]
    assert max(ratios) / min(ratios) < 2.0


def test_interval_leading_order(interval_075):
    tw = build_tower(interval_075)
    s = 1e6
    grid = make_uniform_grid(30.0, 30001).with_points(tw.kinks)
    cf = solve_interval_correction(tw, MODEL, s, grid)
    tm = 0.5 * (1.0 + math.e**2)
    k = int(np.argmin(np.abs(grid.nodes - tm)))
    tau, mu, v = grid.nodes[k], float(tw(grid.nodes[k])), cf.v[k]
    # g(t) = t adds log(sqrt(s) mu): leading term -log s / (4 pi mu s)
    lead = -math.log(s) / (4 * math.pi * mu * s)
    assert v == pytest.approx(lead, rel=0.2)
    full = -(2 * math.log(s) + math.log(4 * SQRT_2PI * tau**1.5) + math.log(mu)) / (EIGHT_PI * mu * s)
    assert v == pytest.approx(full, rel=1e-4)


# -- gluing --------------------------------------------------------------------------


def test_glue_single_full_window_is_identity():
    grid = make_uniform_grid(2.0, 101)
    v = np.sin(grid.nodes) * 1e-3
    cf = CorrectionField(grid, v, 1e3, np.ones(101, bool), np.zeros(101))
    out = glue_corrections([(cf, Window.full())], 1e3)
    assert np.array_equal(out.v, v)


def test_glue_partition_of_unity_and_overlap_error():
    grid = make_uniform_grid(4.0, 401)
    one = CorrectionField(grid, np.ones(401), 1e3, np.ones(401, bool), np.zeros(401))
    a, b = Window(-math.inf, -math.inf, 1.5, 2.5), Window(1.5, 2.5, math.inf, math.inf)
    out = glue_corrections([(one, a), (one, b)], 1e3)
    assert np.allclose(out.v, 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        glue_corrections([(one, a), (one, Window(1.0, 2.0, math.inf, math.inf))], 1e3)


def test_plan_windows_partition_unity(design_3_2, interval_075):
    for cs in (design_3_2, interval_075):
        tw = build_tower(cs)
        plan = correction_plan(tw, 1e4)
        t = np.linspace(cs.t_min - 0.25 * cs.t_min, cs.t_max + 1.0, 20001)
        total = sum(item.window.weight(t) for item in plan)
        assert np.all(total <= 1.0 + 1e-12)
        inside = (t >= cs.t_min) & (t <= cs.t_max)
        assert np.allclose(total[inside], 1.0)


def test_plan_rejects_small_scale():
    cs = SignedClosedSet.from_intervals([(1.0, 1.2, 1), (1.5, 2.0, 1)])
    with pytest.raises(ScaleTooSmallError):
        correction_plan(build_tower(cs), 2.0)


@pytest.mark.parametrize("gluing,p", [("cutoff", 1.5), ("level", 1.0)])
def test_blend_gradient_mass_decreasing(interval_075, gluing, p):
    tw = build_tower(interval_075)
    out = []
    for s in (1e3, 1e4, 1e5):
        _, v, plan = assemble(SequenceSpec(interval_075, gluing=gluing, boundary_scale_exponent=p), s, tw)
        out.append(blend_gradient_mass(v, [it.window for it in plan]))
    assert out[0] > out[1] > out[2]


def test_level_gluing_beats_cutoff_gluing(interval_075):
    tw = build_tower(interval_075)
    gv = {}
    for g, p in (("cutoff", 1.5), ("level", 1.0)):
        _, v, _ = assemble(SequenceSpec(interval_075, gluing=g, boundary_scale_exponent=p), 1e4, tw)
        gv[g] = dirichlet_energy(v.as_function())
    assert gv["level"] < 1e-2 < gv["cutoff"]


# -- sequences -----------------------------------------------------------------------


@pytest.mark.parametrize("name,target", [("singleton", 0.5), ("design", 1.0), ("interval", 0.75)])
def test_sequence_reaches_level(sequences, name, target):
    seq = sequences[name]
    assert seq.target == pytest.approx(target)
    last = seq.entries[-1]
    assert last.s == 1e4 and last.converged
    assert abs(last.J - target) <= 1e-2
    assert last.newton_max_residual < 1e-12
    tr = seq.trends()
    assert tr["ap_residual_decreasing"] and tr["grad_v_decreasing"] and tr["nonlinear_mass_decreasing"]


def test_sequence_sup_v_decreasing(singleton):
    spec = SequenceSpec(singleton)
    sups = [assemble(spec, s)[1].sup_norm(0.5, 3.0) for s in (1e3, 1e4, 1e5)]
    assert sups[0] > sups[1] > sups[2]


def test_negative_set_by_reflection():
    pos = generate_sequence(SequenceSpec(SignedClosedSet.from_points([1.0])))
    neg = generate_sequence(SequenceSpec(SignedClosedSet.from_points([1.0], [-1])))
    assert np.allclose(pos.column("J"), neg.column("J"), rtol=1e-12)


def test_spec_validation(singleton):
    with pytest.raises(ValueError):
        SequenceSpec(singleton, scales=[1e3, 1e2, 1e4])
    with pytest.raises(ValueError):
        SequenceSpec(singleton, scales=[0.5, 1e2, 1e3])
    with pytest.raises(ValueError):
        SequenceSpec(SignedClosedSet.from_points([4.0, 1.0], [1, -1]))
    with pytest.raises(ValueError):
        SequenceSpec(singleton, gluing="other")
    with pytest.raises(ValueError):
        generate_sequence(SequenceSpec(singleton, scales=[1e2, 1e3]))


def test_spec_from_json():
    spec = SequenceSpec.from_json({"set": {"constructor": "points", "t": [1.0]}, "scales": [100, 1000, 10000],
                                   "nonlinearity": "sqrt_damped"})
    assert spec.nl is SQRT_DAMPED and spec.scales == [100.0, 1000.0, 10000.0]
    with pytest.raises(ValueError):
        SequenceSpec.from_json({"set": {"constructor": "points", "t": [1.0]}, "scales": [1e2], "extra": 1})


def test_diagnostics_json(sequences):
    rows = json.loads(json.dumps(sequences["singleton"].to_json()))
    assert len(rows) == 3 and {"s", "J", "ap_residual", "grad_v_sq", "mass_fraction"} <= set(rows[0])


def test_blowup_round_trip(sequences):
    for s, bu in sequences["design"].profiles.items():
        u = bu.materialize()
        back = BlowUp.from_materialized(u, s)
        assert np.allclose(back.profile.t, bu.profile.t, rtol=1e-15)
        assert np.allclose(back.profile.values, bu.profile.values, rtol=1e-15)
        assert dirichlet_energy(u) == pytest.approx(dirichlet_energy(bu.deflate()), rel=1e-12)


# -- weak convergence ----------------------------------------------------------------


def test_weak_convergence_off_the_set(singleton):
    spec = SequenceSpec(singleton)
    phi = PolynomialBump(2.0, 3.0)
    rep = weak_convergence_check(spec, [phi])
    assert rep.targets == [0.0]
    assert max(rep.values[0]) < 1e-12


def test_weak_convergence_at_the_point(singleton):
    spec = SequenceSpec(singleton)
    phi = PolynomialBump(0.5, 1.5, coeffs=(1.0 / 0.25**2,))  # phi(1) = 1
    rep = weak_convergence_check(spec, [phi])
    assert rep.targets[0] == pytest.approx(1.0 / SQRT_2PI)
    errs = rep.errors[0]
    assert errs[-1] < 1e-2 * rep.targets[0]
    assert errs[0] > errs[-1]


def test_weak_convergence_interval_and_design(interval_075, design_3_2):
    for cs, phi in ((interval_075, PolynomialBump(0.5, 9.0, coeffs=(1e-3, 0.0))),
                    (design_3_2, PolynomialBump(0.5, 12.0, coeffs=(1e-3,)))):
        rep = weak_convergence_check(SequenceSpec(cs), [phi])
        tw = build_tower(cs)
        t = weak_target(tw, phi)
        assert rep.errors[0][-1] < 1e-2 * abs(t)


# -- multi-bump ----------------------------------------------------------------------


def test_multibump_single_tower_exact():
    rep = multibump([moser(1.0)], [1e3])
    assert rep.energy == pytest.approx(rep.sum_energies, rel=1e-9)
    assert rep.gap < 1e-9


def test_multibump_two_moser_cross_term():
    # cross energy of two Moser bumps at scales s1 < s2 is 2 sqrt(s1/s2)
    gaps = []
    for s in (10.0, 100.0, 1000.0):
        rep = multibump([moser(1.0), moser(1.0)], [s, s**2])
        assert rep.gap == pytest.approx(2.0 / math.sqrt(s), rel=1e-6)
        gaps.append(rep.gap)
    assert gaps[0] > gaps[1] > gaps[2]


def test_multibump_separation_enforced():
    with pytest.raises(ValueError):
        multibump([moser(1.0), moser(1.0)], [10.0, 20.0])
