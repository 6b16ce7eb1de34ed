"""Divergent critical sequences u_s = delta_{1/s}(mu_C + v_s) built from towers.

Everything lives in the deflated variable tau = t/s, where the tower mu_C is
fixed and the blow-up only enters through the bounded exponent
s (4 pi W^2 - 2 tau).  The correction v is solved pointwise:

* near a set point (or on the gap side of an interval endpoint) from
  s (8 pi mu v + 4 pi v^2) + log g(sqrt(s) W) + log(s)/2 = log M,
  which makes the integrand of the flux integral s M exp(s (4 pi mu^2 - 2 tau));
* on a set interval from
  s (8 pi mu v + 4 pi v^2) + log g(sqrt(s) W) + 3/2 log s = -log(4 sqrt(2 pi) tau^{3/2}),
  which makes the integrand equal to -mu''(tau).

M is chosen so that the Laplace mass of the exponential peak equals the
flux jump q of the tower at that point.  The local corrections are glued
with a smooth partition of unity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad

from .closed_sets import SignedClosedSet, finite_approximant, kappa_bound
from .logdomain import (
    TWO_PI,
    BracketError,
    ExponentField,
    LogGrid,
    SampledRadialFunction,
    dirichlet_energy,
    integrate_exp,
    orlicz_exp_l2_norm,
    refined_grid,
)
from .tm_functional import (
    EIGHT_PI,
    FOUR_PI,
    MODEL,
    Nonlinearity,
    ap_residual,
    concentration_profile,
    get_nonlinearity,
    nonlinear_mass,
)
from .towers import TowerProfile, build_tower, energy_closed_form, kink_fluxes

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
MAX_SCALE = 1e8
LOG_4_SQRT_2PI = math.log(4.0 * math.sqrt(TWO_PI))


class ScaleTooSmallError(ArithmeticError):
    """The scale is too small for the local constructions (escalate s)."""


class SolverFailure(ArithmeticError):
    """Newton failed even at the escalation cap."""


def smoothstep(x):
    """Quintic smoothstep 6x^5 - 15x^4 + 10x^3, clamped to [0, 1]; C^2 at both ends."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return x * x * x * (10.0 + x * (-15.0 + 6.0 * x))


@dataclass(frozen=True)
class Window:
    """Cutoff rising on [rise_lo, rise_hi], equal to 1 up to fall_lo, falling to 0 at fall_hi.

    Infinite ends mean no cutoff on that side.  Equal ends give a sharp step,
    closed on the left and open on the right, so two sharp windows meeting at
    a point never overlap.
    """

    rise_lo: float
    rise_hi: float
    fall_lo: float
    fall_hi: float

    def __post_init__(self):
        if not (self.rise_lo <= self.rise_hi <= self.fall_lo <= self.fall_hi):
            raise ValueError(f"window edges out of order: {self}")

    @classmethod
    def full(cls) -> "Window":
        return cls(-math.inf, -math.inf, math.inf, math.inf)

    @property
    def support(self) -> tuple[float, float]:
        return self.rise_lo, self.fall_hi

    @property
    def blend_zones(self) -> list[tuple[float, float]]:
        zones = []
        if math.isfinite(self.rise_lo) and self.rise_hi > self.rise_lo:
            zones.append((self.rise_lo, self.rise_hi))
        if math.isfinite(self.fall_hi) and self.fall_hi > self.fall_lo:
            zones.append((self.fall_lo, self.fall_hi))
        return zones

    def edges(self) -> list[float]:
        return [e for e in (self.rise_lo, self.rise_hi, self.fall_lo, self.fall_hi)
                if math.isfinite(e)]

    def weight(self, t):
        t = np.asarray(t, dtype=float)
        w = np.ones_like(t)
        if math.isfinite(self.rise_lo):
            if self.rise_hi > self.rise_lo:
                up = smoothstep((t - self.rise_lo) / (self.rise_hi - self.rise_lo))
            else:
                up = (t >= self.rise_lo).astype(float)
            w = np.where(t < self.rise_hi, up, w)
        if math.isfinite(self.fall_hi):
            if self.fall_hi > self.fall_lo:
                down = 1.0 - smoothstep((t - self.fall_lo) / (self.fall_hi - self.fall_lo))
                w = np.where(t > self.fall_lo, down, w)
            else:
                w = np.where(t >= self.fall_hi, 0.0, w)
        return w


@dataclass(frozen=True, eq=False)
class CorrectionField:
    """The correction v on a deflated grid, with per-node Newton status.

    ``residual`` is the absolute residual of the defining equation in its
    s-multiplied form (so exp of it is the relative error of the flux
    integrand); nodes outside every window have v = 0 and count as converged.
    """

    grid: LogGrid
    v: np.ndarray
    s: float
    converged: np.ndarray
    residual: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual))) if self.residual.size else 0.0

    def sup_norm(self, t_lo: float = -math.inf, t_hi: float = math.inf) -> float:
        m = (self.grid.nodes >= t_lo) & (self.grid.nodes <= t_hi)
        return float(np.max(np.abs(self.v[m]))) if np.any(m) else 0.0

    def as_function(self) -> SampledRadialFunction:
        return SampledRadialFunction(self.grid, self.v)


# -- exponent rates and M constants -------------------------------------------------


def side_rates(tower: TowerProfile, t: float) -> tuple[float, float]:
    """Decay rates of 4 pi mu^2 - 2 tau away from the kink t, to the left and to the right.

    The exponent has slope 8 pi mu mu' - 2; a point of the set is a strict
    local maximum, an interval side gives rate 0 (the exponent is flat on
    the set).
    """
    mu = abs(float(tower(t)))
    left, right = tower.slopes_at(t)
    sgn = 1.0 if tower(t) >= 0 else -1.0
    r_left = EIGHT_PI * mu * sgn * left - 2.0
    r_right = 2.0 - EIGHT_PI * mu * sgn * right
    # flat sides are exactly 0 up to rounding
    r_left = 0.0 if abs(r_left) < 1e-12 else r_left
    r_right = 0.0 if abs(r_right) < 1e-12 else r_right
    return r_left, r_right


def compute_M_constants(tower: TowerProfile) -> list[float]:
    """M_j = q_j / (gamma_j^- + gamma_j^+) per set point, deepest point first.

    gamma^+- = 1 / rate on each side, so s M exp(s(4 pi mu^2 - 2 tau)) has
    Laplace mass q_j.  Interior gaps give rate 2 (sigma - 1)/(sigma + 1);
    the outer gap and the unbounded inner gap both give rate 2.
    """
    if not tower.set.is_point_set:
        raise ValueError("M constants are defined for finite point sets")
    out = []
    for t, q in sorted(kink_fluxes(tower), key=lambda tq: -tq[0]):
        rl, rr = side_rates(tower, t)
        out.append(q / (1.0 / rl + 1.0 / rr))
    return out


# -- pointwise Newton ----------------------------------------------------------------


def _newton(phi: Callable, dphi: Callable, v0: np.ndarray, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    v = v0.copy()
    for _ in range(max_iter):
        f = phi(v)
        todo = ~(np.abs(f) < tol)
        if not np.any(todo):
            break
        with np.errstate(all="ignore"):
            step = f / dphi(v)
        v = np.where(todo, v - step, v)
    f = phi(v)
    ok = np.isfinite(f) & (np.abs(f) < tol)
    return v, ok, np.where(np.isfinite(f), f, np.inf)


def _log_g_terms(nl: Nonlinearity, s: float, mu: np.ndarray):
    rs = math.sqrt(s)

    def log_g(v):
        with np.errstate(all="ignore"):
            lg, sg = nl.log_abs_g(rs * (mu + v))
        return np.where(sg > 0, lg, np.nan)

    def dlog_g(v):
        x = rs * (mu + v)
        with np.errstate(all="ignore"):
            return rs * np.asarray(nl.g_prime(x), dtype=float) / np.asarray(nl.g(x), dtype=float)

    return log_g, dlog_g


def _field_on(grid: LogGrid, s: float, mask, v_loc, ok_loc, res_loc) -> CorrectionField:
    v = np.zeros(len(grid))
    conv = np.ones(len(grid), dtype=bool)
    res = np.zeros(len(grid))
    v[mask], conv[mask], res[mask] = v_loc, ok_loc, res_loc
    return CorrectionField(grid, v, float(s), conv, res)


def _window_mask(grid: LogGrid, window: Window, tower: TowerProfile):
    lo, hi = window.support
    mask = (grid.nodes >= lo) & (grid.nodes <= hi)
    mu = np.asarray(tower(grid.nodes[mask]), dtype=float)
    if np.any(mu <= 0.0):
        raise ValueError("the tower must be positive on the correction window")
    return mask, mu


def point_equation(tower, nl, s, M, t):
    """Left side minus right side of the point equation, multiplied by s."""
    mu = np.asarray(tower(np.asarray(t, dtype=float)), dtype=float)
    log_g, _ = _log_g_terms(nl, s, mu)
    log_rhs = math.log(M) - 0.5 * math.log(s)

    def phi(v):
        return s * (EIGHT_PI * mu * v + FOUR_PI * v * v) + log_g(v) - log_rhs

    return phi


def solve_point_correction(
    tower: TowerProfile, nl: Nonlinearity, s: float, M: float, window: Window, grid: LogGrid
) -> CorrectionField:
    """Newton per node for 8 pi mu v + 4 pi v^2 + log g(sqrt(s)(mu+v))/s + log s/(2s) = log M / s.

    Solved in the s-multiplied form to absolute tolerance 1e-12, starting
    from v = 0.  Nodes outside ``window`` keep v = 0.
    """
    if not M > 0.0:
        raise ValueError("M must be positive")
    mask, mu = _window_mask(grid, window, tower)
    log_g, dlog_g = _log_g_terms(nl, s, mu)
    log_rhs = math.log(M) - 0.5 * math.log(s)

    def phi(v):
        return s * (EIGHT_PI * mu * v + FOUR_PI * v * v) + log_g(v) - log_rhs

    def dphi(v):
        return s * (EIGHT_PI * mu + EIGHT_PI * v) + dlog_g(v)

    v, ok, res = _newton(phi, dphi, np.zeros_like(mu))
    return _field_on(grid, s, mask, v, ok, res)


def interval_rhs(s: float, tau):
    """-(3/2) log s - log(4 sqrt(2 pi) tau^{3/2}): log of s^{-3/2} (-mu''(tau))."""
    return -1.5 * math.log(s) + log_density(tau)


def solve_interval_correction(
    tower: TowerProfile,
    nl: Nonlinearity,
    s: float,
    grid: Optional[LogGrid] = None,
    window: Optional[Window] = None,
) -> CorrectionField:
    """Newton per node for the interval equation

        v + v^2/(2 mu) + log g(sqrt(s)(mu+v))/(8 pi s mu)
          = -(3/(16 pi mu)) log s / s - (log(4 sqrt(2 pi)) + (3/2) log tau)/(8 pi s mu),

    solved in the form multiplied by 8 pi s mu.  Without a window the single
    set interval of the tower is used.
    """
    if window is None:
        comps = [c for c in tower.set.components if not c.is_point]
        if len(comps) != 1 or len(tower.set) != 1:
            raise ValueError("default window needs a tower built from a single interval")
        window = Window(comps[0].t_lo, comps[0].t_lo, comps[0].t_hi, comps[0].t_hi)
    if grid is None:
        grid = tower.default_grid(n=2**14 + 1)
    mask, mu = _window_mask(grid, window, tower)
    tau = grid.nodes[mask]
    log_g, dlog_g = _log_g_terms(nl, s, mu)
    rhs = interval_rhs(s, tau)

    def phi(v):
        return s * (EIGHT_PI * mu * v + FOUR_PI * v * v) + log_g(v) - rhs

    def dphi(v):
        return s * (EIGHT_PI * mu + EIGHT_PI * v) + dlog_g(v)

    v, ok, res = _newton(phi, dphi, np.zeros_like(mu))
    return _field_on(grid, s, mask, v, ok, res)


def psi_field(cf: CorrectionField, tower: TowerProfile, nl: Nonlinearity) -> np.ndarray:
    """psi = 8 pi mu v + 4 pi v^2 + (log g(sqrt(s) W) + 3/2 log s)/s at every node.

    Wherever v solves the point equation with constant M, exp(s psi) = M s.
    """
    s = cf.s
    mu = np.asarray(tower(cf.grid.nodes), dtype=float)
    with np.errstate(divide="ignore"):
        lg, _ = nl.log_abs_g(math.sqrt(s) * (mu + cf.v))
    return EIGHT_PI * mu * cf.v + FOUR_PI * cf.v**2 + (lg + 1.5 * math.log(s)) / s


# -- gluing --------------------------------------------------------------------------


def log_density(tau):
    """log(-mu''(tau)) = -log(4 sqrt(2 pi)) - (3/2) log tau for the envelope sqrt(tau/2pi)."""
    return -LOG_4_SQRT_2PI - 1.5 * np.log(np.asarray(tau, dtype=float))


def _edge_blend(d, width):
    """Weight of the interior level at gap-side distance d from an interval endpoint."""
    return 1.0 - smoothstep(np.asarray(d, dtype=float) / width)


def edge_level(tower: TowerProfile, s: float, t_edge: float, side: int, width: float, log_M: float, tau):
    """Target log-integrand on the gap side of an interval endpoint.

    Blends log(s M) (a Laplace peak of height s M) into log(-mu'') (the
    interval level) over gap-side distance ``width``; at the endpoint itself
    it equals the interval level, so the two solutions meet continuously.
    """
    tau = np.asarray(tau, dtype=float)
    chi = _edge_blend(side * (tau - t_edge), width)
    return (1.0 - chi) * (log_M + math.log(s)) + chi * log_density(tau)


def edge_M(tower: TowerProfile, s: float, t_edge: float, side: int, width: float, q: float,
           reach: float) -> float:
    """log M such that the gap-side integrand exp(level + s(4 pi mu^2 - 2 tau)) has mass q."""
    from scipy.optimize import brentq

    rate = side_rates(tower, t_edge)[0 if side < 0 else 1]
    if not rate > 0.0:
        raise ValueError(f"endpoint {t_edge} has no decaying gap side")
    d_max = min(reach, width + 60.0 / (s * rate))

    def log_mass(log_M):
        def f(d):
            tau = t_edge + side * d
            mu = float(tower(tau))
            return math.exp(float(edge_level(tower, s, t_edge, side, width, log_M, tau))
                            + s * (FOUR_PI * mu * mu - 2.0 * tau))
        pts = [p for p in (width, 1.0 / (s * rate)) if p < d_max]
        val, _ = quad(f, 0.0, d_max, points=pts or None, epsabs=0.0, epsrel=1e-11, limit=400)
        return math.log(val)

    lq = math.log(q)
    guess = math.log(q * rate)
    lo, hi = guess - 10.0, guess + 10.0 + s * rate * width
    while log_mass(lo) > lq:
        lo -= 10.0
    while log_mass(hi) < lq:
        hi += 10.0
    return brentq(lambda x: log_mass(x) - lq, lo, hi, xtol=1e-14, rtol=1e-14)


def solve_edge_correction(
    tower: TowerProfile, nl: Nonlinearity, s: float, t_edge: float, side: int, width: float,
    log_M: float, window: Window, grid: LogGrid,
) -> CorrectionField:
    """Newton per node for s(8 pi mu v + 4 pi v^2) + log g(sqrt(s) W) + 3/2 log s = edge level."""
    mask, mu = _window_mask(grid, window, tower)
    tau = grid.nodes[mask]
    log_g, dlog_g = _log_g_terms(nl, s, mu)
    rhs = edge_level(tower, s, t_edge, side, width, log_M, tau) - 1.5 * math.log(s)

    def phi(v):
        return s * (EIGHT_PI * mu * v + FOUR_PI * v * v) + log_g(v) - rhs

    def dphi(v):
        return s * (EIGHT_PI * mu + EIGHT_PI * v) + dlog_g(v)

    v, ok, res = _newton(phi, dphi, np.zeros_like(mu))
    return _field_on(grid, s, mask, v, ok, res)


@dataclass(frozen=True)
class PlanItem:
    kind: str  # "point", "interval", "edge" (level blend) or "edge_cutoff" (point solution)
    window: Window
    M: Optional[float] = None
    t: Optional[float] = None
    side: int = 0
    width: Optional[float] = None


GLUING_MODES = ("level", "cutoff")


def correction_plan(
    tower: TowerProfile,
    s: float,
    boundary_scale_exponent: float = 1.0,
    margin: float = 1.0,
    gluing: str = "level",
) -> list[PlanItem]:
    """Local corrections and their cutoff windows for a positive set.

    Neighbouring components share a blend zone centred in their gap, so the
    windows form a partition of unity on the hull of the set plus ``margin``.
    Near an interval endpoint, with w = s^(-boundary_scale_exponent):

    * ``gluing="level"``: the gap side gets a solution whose target level
      moves from the interval level at the endpoint to a Laplace peak over
      distance w, with M re-solved so the endpoint flux is exact;
    * ``gluing="cutoff"``: v itself is blended from the interval solution to a
      one-sided point solution (M = q * rate) over [a - w, a - w/2].
    """
    if gluing not in GLUING_MODES:
        raise ValueError(f"gluing must be one of {GLUING_MODES}")
    comps = tower.set.ascending()
    if any(c.sign != 1 for c in comps):
        raise ValueError("correction plan needs a positive set")
    fluxes = dict(kink_fluxes(tower))
    w = s ** -boundary_scale_exponent

    def left_zone(i):
        c = comps[i]
        if i == 0:
            h = min(margin, c.t_lo / 4.0)
            return c.t_lo - 2.0 * h, c.t_lo - h
        gap_lo, gap_hi = comps[i - 1].t_hi, c.t_lo
        b = min(margin, (gap_hi - gap_lo) / 4.0)
        m = 0.5 * (gap_lo + gap_hi)
        return m - 0.5 * b, m + 0.5 * b

    def right_zone(i):
        c = comps[i]
        if i + 1 == len(comps):
            return c.t_hi + margin, c.t_hi + 2.0 * margin
        return left_zone(i + 1)

    plan = []
    for i, c in enumerate(comps):
        zl, zr = left_zone(i), right_zone(i)
        if c.is_point:
            rl, rr = side_rates(tower, c.t_lo)
            M = fluxes[c.t_lo] / (1.0 / rl + 1.0 / rr)
            plan.append(PlanItem("point", Window(zl[0], zl[1], zr[0], zr[1]), M, c.t_lo))
            continue
        a, b = c.t_lo, c.t_hi
        if not (zl[1] < a - w and b + w < zr[0]):
            raise ScaleTooSmallError(f"blend width {w:g} too wide for the gaps at s={s:g}")
        if gluing == "level":
            lm_a = edge_M(tower, s, a, -1, w, fluxes[a], a - zl[1])
            lm_b = edge_M(tower, s, b, +1, w, fluxes[b], zr[0] - b)
            plan.append(PlanItem("edge", Window(zl[0], zl[1], a, a), lm_a, a, -1, w))
            plan.append(PlanItem("interval", Window(a, a, b, b)))
            plan.append(PlanItem("edge", Window(b, b, zr[0], zr[1]), lm_b, b, +1, w))
        else:
            rl, _ = side_rates(tower, a)
            _, rr = side_rates(tower, b)
            plan.append(PlanItem("edge_cutoff", Window(zl[0], zl[1], a - w, a - 0.5 * w),
                                 fluxes[a] * rl, a, -1, w))
            plan.append(PlanItem("interval", Window(a - w, a - 0.5 * w, b + 0.5 * w, b + w)))
            plan.append(PlanItem("edge_cutoff", Window(b + 0.5 * w, b + w, zr[0], zr[1]),
                                 fluxes[b] * rr, b, +1, w))
    return plan


def solve_plan(tower: TowerProfile, nl: Nonlinearity, s: float, plan: Sequence[PlanItem],
               grid: LogGrid) -> list[tuple[CorrectionField, Window]]:
    pieces = []
    for item in plan:
        if item.kind == "interval":
            cf = solve_interval_correction(tower, nl, s, grid, item.window)
        elif item.kind == "edge":
            cf = solve_edge_correction(tower, nl, s, item.t, item.side, item.width, item.M,
                                       item.window, grid)
        else:
            cf = solve_point_correction(tower, nl, s, item.M, item.window, grid)
        pieces.append((cf, item.window))
    return pieces


def glue_corrections(pieces: Sequence[tuple[CorrectionField, Window]], s: float) -> CorrectionField:
    """v = sum_i chi_i v_i with chi_i the window weights.

    The weights must not sum above 1 anywhere; a node counts as converged
    when every piece with positive weight there converged.
    """
    if not pieces:
        raise ValueError("nothing to glue")
    grid = pieces[0][0].grid
    t = grid.nodes
    v = np.zeros(len(grid))
    total = np.zeros(len(grid))
    conv = np.ones(len(grid), dtype=bool)
    res = np.zeros(len(grid))
    for cf, win in pieces:
        if cf.grid is not grid and not np.array_equal(cf.grid.nodes, t):
            raise ValueError("corrections live on different grids")
        wt = win.weight(t)
        total += wt
        live = wt > 0.0
        v += np.where(live, wt * cf.v, 0.0)
        conv &= ~live | cf.converged
        res = np.where(live, np.maximum(res, np.abs(cf.residual)), res)
    if np.any(total > 1.0 + 1e-12):
        bad = t[total > 1.0 + 1e-12]
        raise ValueError(f"overlapping incompatible windows near t={bad[0]:g}")
    return CorrectionField(grid, v, float(s), conv, res)


def blend_gradient_mass(cf: CorrectionField, windows: Sequence[Window]) -> float:
    """2 pi int (v')^2 over the blend zones of ``windows`` (cells inside a zone)."""
    t = cf.grid.nodes
    cells = TWO_PI * np.diff(cf.v) ** 2 / np.diff(t)
    mid = 0.5 * (t[:-1] + t[1:])
    inside = np.zeros(mid.size, dtype=bool)
    for win in windows:
        for lo, hi in win.blend_zones:
            inside |= (mid >= lo) & (mid <= hi)
    return float(np.sum(cells[inside]))


# -- sequences -----------------------------------------------------------------------


@dataclass
class SequenceSpec:
    """A sign-definite set, a nonlinearity and the scales to sample."""

    set: SignedClosedSet
    nl: Nonlinearity = MODEL
    scales: Sequence[float] = (1e2, 1e3, 1e4)
    boundary_scale_exponent: float = 1.0
    margin: float = 1.0
    gluing: str = "level"
    rho_probes: Sequence[float] = (math.exp(-1.0),)
    base_h: float = 2e-3
    max_scale: float = MAX_SCALE
    epsilon_schedule: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.scales = [float(s) for s in self.scales]
        if not self.scales or any(not (math.isfinite(s) and s > 1.0) for s in self.scales):
            raise ValueError("scales must be finite and > 1")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly increasing")
        if not self.set.is_sign_definite:
            raise ValueError("nodal (sign-changing) sets are not supported")
        if self.gluing not in GLUING_MODES:
            raise ValueError(f"gluing must be one of {GLUING_MODES}")
        if not self.margin > 0 or not self.base_h > 0:
            raise ValueError("margin and base_h must be positive")

    @property
    def sign(self) -> int:
        return self.set.components[0].sign

    @property
    def positive_set(self) -> SignedClosedSet:
        if self.sign == 1:
            return self.set
        return SignedClosedSet.from_intervals([(c.t_lo, c.t_hi, 1) for c in self.set.ascending()])

    @property
    def M_constants(self) -> list[float]:
        return compute_M_constants(build_tower(self.positive_set))

    @classmethod
    def from_json(cls, spec: dict) -> "SequenceSpec":
        allowed = {"set", "nonlinearity", "scales", "rho_probes", "epsilon_schedule",
                   "boundary_scale_exponent", "margin", "base_h", "gluing"}
        unknown = set(spec) - allowed
        if unknown:
            raise ValueError(f"unknown keys in sequence spec: {sorted(unknown)}")
        if "set" not in spec or "scales" not in spec:
            raise ValueError("sequence spec needs 'set' and 'scales'")
        kw = {k: spec[k] for k in ("rho_probes", "epsilon_schedule", "boundary_scale_exponent",
                                   "margin", "base_h", "gluing") if k in spec}
        return cls(SignedClosedSet.from_json(spec["set"]),
                   get_nonlinearity(spec.get("nonlinearity", "model")),
                   spec["scales"], **kw)


@dataclass(frozen=True)
class BlowUp:
    """u = delta_{1/s} W held through its deflated profile W; nothing is resampled."""

    profile: SampledRadialFunction
    scale: float

    def deflate(self) -> SampledRadialFunction:
        return self.profile

    def t_nodes(self) -> np.ndarray:
        return self.scale * self.profile.t

    def values(self) -> np.ndarray:
        """U(s tau_i) = sqrt(s) W(tau_i) at the blown-up nodes t_i = s tau_i."""
        return math.sqrt(self.scale) * self.profile.values

    def materialize(self) -> SampledRadialFunction:
        return SampledRadialFunction(LogGrid(self.t_nodes()), self.values())

    @classmethod
    def from_materialized(cls, u: SampledRadialFunction, scale: float) -> "BlowUp":
        return cls(SampledRadialFunction(LogGrid(u.t / scale), u.values / math.sqrt(scale)), scale)


@dataclass
class ScaleDiagnostics:
    s: float
    s_requested: float
    J: float
    target: float
    ap_residual: float
    ap_residual_deflated: float
    nonlinear_mass: float
    dirichlet: float
    grad_v_sq: float
    orlicz_remainder: float
    mass_fraction: list
    newton_max_residual: float
    converged: bool
    n_nodes: int
    stage: Optional[int] = None
    epsilon: Optional[float] = None
    kappa: Optional[float] = None
    stage_target: Optional[float] = None

    @property
    def grad_v(self) -> float:
        return math.sqrt(self.grad_v_sq)

    @property
    def gap(self) -> float:
        return abs(self.J - self.target)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "s", "s_requested", "J", "target", "ap_residual", "ap_residual_deflated",
            "nonlinear_mass", "dirichlet", "grad_v_sq", "orlicz_remainder", "mass_fraction",
            "newton_max_residual", "converged", "n_nodes")}
        for k in ("stage", "epsilon", "kappa", "stage_target"):
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out


@dataclass
class SequenceDiagnostics:
    target: float
    entries: list = field(default_factory=list)
    profiles: dict = field(default_factory=dict, repr=False)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.entries]

    def trends(self) -> dict:
        """Monotonicity checks over the sweep (ap over the last three scales)."""

        def decreasing(xs, strict=True):
            return all((b < a) if strict else (b <= a) for a, b in zip(xs, xs[1:]))

        return {
            "final_gap": self.entries[-1].gap,
            "ap_residual_decreasing": decreasing(self.column("ap_residual")[-3:]),
            "grad_v_decreasing": decreasing(self.column("grad_v_sq")),
            "nonlinear_mass_decreasing": decreasing(self.column("nonlinear_mass")),
        }

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]


def deflated_grid(tower: TowerProfile, s: float, plan: Sequence[PlanItem], base_h: float = 2e-3,
                  ratio: float = 1.02) -> LogGrid:
    """Uniform grid on [0, 2 t_deepest + 10] refined at 0, at the kinks and at blend edges.

    Near 0 and the kinks the node spacing starts at 1/(200 s), the width of
    the exponential peaks; at a blend edge it starts at 1/20 of the zone.
    """
    t_end = 2.0 * tower.t_deepest + 10.0
    n = max(2001, int(math.ceil(t_end / base_h)) + 1)
    peak = 1.0 / (200.0 * s)
    centers, hs = [0.0], [peak]
    for t in tower.kinks:
        centers.append(t)
        hs.append(peak)
    for item in plan:
        for lo, hi in item.window.blend_zones:
            width = hi - lo
            centers += [lo, hi]
            hs += [min(peak, width / 20.0)] * 2
        if item.width is not None:
            centers.append(item.t + item.side * item.width)
            hs.append(min(peak, item.width / 20.0))
    return refined_grid(t_end, n, centers, np.array(hs), ratio=ratio)


def assemble(spec: SequenceSpec, s: float, tower: Optional[TowerProfile] = None):
    """Deflated profile W = mu + v at scale s, with the glued correction and the plan."""
    tower = tower or build_tower(spec.positive_set)
    plan = correction_plan(tower, s, spec.boundary_scale_exponent, spec.margin, spec.gluing)
    grid = deflated_grid(tower, s, plan, spec.base_h)
    pieces = solve_plan(tower, spec.nl, s, plan, grid)
    v = glue_corrections(pieces, s)
    mu = np.asarray(tower(grid.nodes), dtype=float)
    W = SampledRadialFunction(grid, spec.sign * (mu + v.v))
    return W, v, plan


def _orlicz_or_zero(v: SampledRadialFunction, s: float) -> float:
    try:
        return orlicz_exp_l2_norm(v, scale=s, bracket=(1e-14, 1e3))
    except BracketError:
        return 0.0


def diagnose(spec: SequenceSpec, s: float, tower: Optional[TowerProfile] = None,
             s_requested: Optional[float] = None):
    """All diagnostics of u = delta_{1/s}(mu_C + v) at one scale, plus W."""
    tower = tower or build_tower(spec.positive_set)
    W, v, plan = assemble(spec, s, tower)
    nl = spec.nl
    nm = nonlinear_mass(W, nl, s)
    e = dirichlet_energy(W)
    vf = v.as_function()
    d = ScaleDiagnostics(
        s=float(s),
        s_requested=float(s if s_requested is None else s_requested),
        J=0.5 * e - nm,
        target=0.5 * energy_closed_form(tower).total,
        ap_residual=ap_residual(W, nl, s),
        ap_residual_deflated=ap_residual(W, nl, s, deflated=True),
        nonlinear_mass=nm,
        dirichlet=e,
        grad_v_sq=dirichlet_energy(vf),
        orlicz_remainder=_orlicz_or_zero(vf, s),
        mass_fraction=concentration_profile(W, spec.rho_probes, s).mass_fraction,
        newton_max_residual=v.max_residual,
        converged=v.all_converged,
        n_nodes=len(W.grid),
    )
    return d, W, v


def _escalating(spec: SequenceSpec, s: float, tower: TowerProfile, accept=None):
    """Diagnose at s, multiplying s by 10 until Newton converges (and ``accept`` holds)."""
    trial = s
    last_err = None
    while trial <= spec.max_scale:
        try:
            d, W, v = diagnose(spec, trial, tower, s_requested=s)
        except ScaleTooSmallError as exc:
            last_err = exc
        else:
            if d.converged and (accept is None or accept(d)):
                return d, W, v
            last_err = SolverFailure(f"Newton did not converge at s={trial:g}")
        trial *= 10.0
    raise SolverFailure(f"no admissible scale up to {spec.max_scale:g}: {last_err}")


def _is_infinite_limit(cset: SignedClosedSet) -> bool:
    """A Cantor iterate standing for its measure-zero limit set."""
    return not cset.is_point_set and cset.has_measure_zero()


def generate_sequence(spec: SequenceSpec, keep_profiles: bool = False) -> SequenceDiagnostics:
    """Diagnostics of the critical sequence at every requested scale.

    Sets flagged as measure zero (a Cantor generator) go through the
    diagonal construction of :func:`generate_diagonal` instead.
    """
    if _is_infinite_limit(spec.set):
        return generate_diagonal(spec, keep_profiles=keep_profiles)
    if len(spec.scales) < 3:
        raise ValueError("at least 3 scales are needed for the trend checks")
    tower = build_tower(spec.positive_set)
    out = SequenceDiagnostics(0.5 * energy_closed_form(tower).total)
    for s in spec.scales:
        d, W, _ = _escalating(spec, s, tower)
        out.entries.append(d)
        if keep_profiles:
            out.profiles[s] = BlowUp(W, d.s)
    return out


def generate_diagonal(spec: SequenceSpec, keep_profiles: bool = False) -> SequenceDiagnostics:
    """Diagonal sequence over finite approximants C_j of a measure-zero set.

    Stage j uses epsilon_j (default 2^-j, j = 1..5) and the smallest scale
    10^k * scales[0] (never below the previous stage's) at which both the
    criticality residual and ||grad v|| are at most 1/j.
    """
    eps = list(spec.epsilon_schedule or [2.0 ** -j for j in range(1, 6)])
    full = build_tower(spec.positive_set)
    out = SequenceDiagnostics(0.5 * energy_closed_form(full).total)
    s = spec.scales[0]
    for j, e in enumerate(eps, start=1):
        cj = finite_approximant(spec.positive_set, e)
        tj = build_tower(cj)
        sub = SequenceSpec(cj, spec.nl, [s], spec.boundary_scale_exponent, spec.margin,
                           spec.gluing, spec.rho_probes, spec.base_h, spec.max_scale)
        d, W, _ = _escalating(sub, s, tj, accept=lambda d, j=j: d.ap_residual <= 1.0 / j and d.grad_v <= 1.0 / j)
        d.stage, d.epsilon = j, e
        d.kappa = kappa_bound(spec.positive_set, cj)
        d.stage_target, d.target = d.target, out.target
        out.entries.append(d)
        if keep_profiles:
            out.profiles[d.s] = BlowUp(W, d.s)
        s = d.s
    return out


# -- weak convergence ----------------------------------------------------------------


@dataclass(frozen=True)
class PolynomialBump:
    """phi(tau) = p(tau) ((tau - lo)(hi - tau))^2 on [lo, hi], zero elsewhere; C^1."""

    lo: float
    hi: float
    coeffs: tuple = (1.0,)

    def __call__(self, tau):
        tau = np.asarray(tau, dtype=float)
        inside = (tau > self.lo) & (tau < self.hi)
        bump = ((tau - self.lo) * (self.hi - tau)) ** 2
        return np.where(inside, np.polyval(self.coeffs, tau) * bump, 0.0)


def flux_integral(W: SampledRadialFunction, nl: Nonlinearity, s: float, phi: Callable) -> float:
    """I_s(phi) = s^{3/2} int g(sqrt(s) W) exp(s (4 pi W^2 - 2 tau)) phi(tau) dtau."""
    tau, w = W.t, W.values
    lg, sg = nl.log_abs_g(math.sqrt(s) * w)
    lv = 1.5 * math.log(s) + lg + s * (FOUR_PI * w * w - 2.0 * tau)
    weight = SampledRadialFunction(W.grid, sg * np.asarray(phi(tau), dtype=float))
    return integrate_exp(ExponentField(W.grid, lv), weight)


def weak_target(tower: TowerProfile, phi: Callable) -> float:
    """int mu' phi' = sum of kink fluxes q phi(t) + int over set intervals of -mu'' phi."""
    total = sum(q * float(phi(t)) for t, q in kink_fluxes(tower))
    for c in tower.set.components:
        if not c.is_point:
            val, _ = quad(lambda x: float(phi(x)) / (4.0 * math.sqrt(TWO_PI) * x**1.5),
                          c.t_lo, c.t_hi, epsabs=1e-14, epsrel=1e-12, limit=200)
            total += c.sign * val
    return total


@dataclass
class WeakConvergenceReport:
    scales: list
    targets: list
    values: list  # values[i][k]: test function i at scale k

    @property
    def errors(self) -> list:
        return [[abs(v - t) for v in row] for row, t in zip(self.values, self.targets)]

    def to_json(self) -> dict:
        return {"scales": self.scales, "targets": self.targets,
                "values": self.values, "errors": self.errors}


def weak_convergence_check(spec: SequenceSpec, test_functions: Sequence[Callable]) -> WeakConvergenceReport:
    if _is_infinite_limit(spec.set):
        raise ValueError("weak convergence check runs on finite sets and intervals")
    tower = build_tower(spec.positive_set)
    targets = [weak_target(tower, phi) for phi in test_functions]
    values = [[] for _ in test_functions]
    used = []
    for s in spec.scales:
        d, W, _ = _escalating(spec, s, tower)
        used.append(d.s)
        Wp = SampledRadialFunction(W.grid, spec.sign * W.values)
        for i, phi in enumerate(test_functions):
            values[i].append(flux_integral(Wp, spec.nl, d.s, phi))
    return WeakConvergenceReport(used, targets, values)


# -- multi-bump superposition --------------------------------------------------------


@dataclass
class MultibumpReport:
    function: SampledRadialFunction
    energy: float
    sum_energies: float
    separation: float

    @property
    def gap(self) -> float:
        return abs(self.energy - self.sum_energies)

    def to_json(self) -> dict:
        return {"energy": self.energy, "sum_energies": self.sum_energies,
                "gap": self.gap, "separation": self.separation}


def multibump(
    towers: Sequence[TowerProfile],
    scales: Sequence[float],
    min_separation: float = math.log(10.0),
    n_per_tower: int = 2**14 + 1,
) -> MultibumpReport:
    """Sum of delta_{1/s_p} mu_p at one centre, with its energy and the sum of energies.

    Scales must be pairwise separated by ``min_separation`` in log s.  Each
    bump contributes its own kink-aligned grid, scaled to its blow-up.
    """
    if len(towers) != len(scales) or not towers:
        raise ValueError("need one scale per tower")
    logs = [math.log(s) for s in scales]
    for i in range(len(logs)):
        for k in range(i + 1, len(logs)):
            if abs(logs[i] - logs[k]) < min_separation - 1e-12:
                raise ValueError(
                    f"scales {scales[i]:g} and {scales[k]:g} are closer than "
                    f"exp({min_separation:g}) apart")
    nodes = []
    for tw, s in zip(towers, scales):
        nodes.append(s * tw.default_grid(n_per_tower).nodes)
    grid = LogGrid(np.unique(np.concatenate(nodes)))

    def u(t, towers=tuple(towers), scales=tuple(scales)):
        t = np.asarray(t, dtype=float)
        return sum(math.sqrt(s) * np.asarray(tw(t / s)) for tw, s in zip(towers, scales))

    fn = SampledRadialFunction.from_callable(grid, u)
    energies = [energy_closed_form(tw).total for tw in towers]
    sep = min((abs(a - b) for i, a in enumerate(logs) for b in logs[i + 1:]), default=math.inf)
    return MultibumpReport(fn, dirichlet_energy(fn), float(sum(energies)), sep)


__all__ = [
    "BlowUp", "CorrectionField", "MultibumpReport", "PlanItem", "PolynomialBump",
    "ScaleDiagnostics", "ScaleTooSmallError", "SequenceDiagnostics", "SequenceSpec",
    "SolverFailure", "WeakConvergenceReport", "Window", "assemble", "blend_gradient_mass",
    "compute_M_constants", "correction_plan", "edge_M", "edge_level", "log_density",
    "solve_edge_correction", "solve_plan", "deflated_grid", "diagnose", "flux_integral",
    "generate_diagonal", "generate_sequence", "glue_corrections", "interval_rhs",
    "multibump", "point_equation", "psi_field", "side_rates", "smoothstep",
    "solve_interval_correction", "solve_point_correction", "weak_convergence_check",
    "weak_target",
]
