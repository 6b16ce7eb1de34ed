"""The Trudinger-Moser functional J, critical-growth nonlinearities and criticality diagnostics.

J(u) = 1/2 ||grad u||^2 - 1/(8 pi) int_B F(u) dx,  F' = f = 8 pi g(u) exp(4 pi u^2).

Every functional accepts ``scale=s``: the samples are then read as the
deflated profile W of the blown-up function u = delta_{1/s} W, i.e.
U(t) = sqrt(s) W(t/s), and all integrals are rewritten in the deflated
variable tau = t/s.  The substitution is exact, and the exponents
s (4 pi W^2 - 2 tau) stay bounded where exp(4 pi U^2) itself would not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from .logdomain import (
    LOG_FLOAT_MAX,
    TWO_PI,
    ExponentField,
    SampledRadialFunction,
    dirichlet_energy,
    logexpm1,
    log_integrate_exp,
    tail_integrate_exp,
)

FOUR_PI = 4.0 * math.pi
EIGHT_PI = 8.0 * math.pi
_QUAD_DIRECT_LIMIT = 2000


@dataclass(frozen=True)
class Nonlinearity:
    """f(u) = 8 pi g(u) exp(4 pi u^2) with F(u) = int_0^u f.

    ``log_F`` may give log F in closed form; otherwise F is integrated by
    adaptive Gauss-Kronrod quadrature.  ``asserted`` lists the growth
    conditions the provider vouches for ("g0", "g1", "g2").
    """

    name: str
    g: Callable
    g_prime: Callable
    log_F: Optional[Callable] = None
    asserted: frozenset = field(default_factory=lambda: frozenset({"g0", "g1", "g2"}))

    def log_abs_g(self, x):
        gx = np.asarray(self.g(np.asarray(x, dtype=float)), dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(np.abs(gx)), np.sign(gx)

    def log_abs_F(self, x):
        """(log|F(x)|, sign F(x)) elementwise, overflow-free for large |x|."""
        x = np.asarray(x, dtype=float)
        if self.log_F is not None:
            with np.errstate(divide="ignore"):
                lf = np.asarray(self.log_F(x), dtype=float)
            return lf, np.where(np.isneginf(lf), 0.0, 1.0)
        uniq, inv = np.unique(x, return_inverse=True)
        damped = self._damped_integral(uniq)
        with np.errstate(divide="ignore"):
            lf = FOUR_PI * uniq**2 + np.log(np.abs(damped))
        return lf[inv].reshape(x.shape), np.sign(damped)[inv].reshape(x.shape)

    def _damped_integral(self, xs: np.ndarray) -> np.ndarray:
        """I(x) = int_0^x 8 pi g(y) exp(4 pi (y^2 - x^2)) dy, so F = exp(4 pi x^2) I."""

        def one(x):
            if x == 0.0:
                return 0.0
            val, _ = quad(lambda y: EIGHT_PI * float(self.g(y)) * math.exp(FOUR_PI * (y * y - x * x)),
                          0.0, x, epsabs=0.0, epsrel=1e-10, limit=200)
            return val

        if xs.size <= _QUAD_DIRECT_LIMIT:
            return np.array([one(float(x)) for x in xs])
        # dense table of the smooth function I, then spline lookup
        table_x = np.linspace(xs.min(), xs.max(), _QUAD_DIRECT_LIMIT)
        table_x = np.union1d(table_x, [0.0]) if table_x[0] < 0.0 < table_x[-1] else table_x
        spline = CubicSpline(table_x, [one(float(x)) for x in table_x])
        return spline(xs)

    def check_g1(self, T: float, t_max: float = 50.0, n: int = 200) -> bool:
        """g > 0 on [T, t_max] and g < 0 on [-t_max, -T] at sampled points."""
        ts = np.geomspace(T, t_max, n)
        return bool(np.all(np.asarray(self.g(ts)) > 0) and np.all(np.asarray(self.g(-ts)) < 0))

    def check_g0(self, t_lo: float = 2.0, t_hi: float = 1e4, n: int = 60) -> bool:
        """|g'(t) / (g(t) t)| decreases toward 0 along a log-spaced sample."""
        ts = np.geomspace(t_lo, t_hi, n)
        ratio = np.abs(np.asarray(self.g_prime(ts)) / (np.asarray(self.g(ts)) * ts))
        return bool(np.all(np.diff(ratio) <= 1e-15) and ratio[-1] < 1e-3 * max(1.0, ratio[0]))


def _model_log_F(x):
    return logexpm1(FOUR_PI * np.asarray(x, dtype=float) ** 2)


MODEL = Nonlinearity(
    name="model",
    g=lambda t: np.asarray(t, dtype=float),
    g_prime=lambda t: np.ones_like(np.asarray(t, dtype=float)),
    log_F=_model_log_F,
)

SQRT_DAMPED = Nonlinearity(
    name="sqrt_damped",
    g=lambda t: np.asarray(t, dtype=float) * (1.0 + np.asarray(t, dtype=float) ** 2) ** -0.25,
    g_prime=lambda t: ((1.0 + np.asarray(t, dtype=float) ** 2) ** -1.25
                       * (1.0 + 0.5 * np.asarray(t, dtype=float) ** 2)),
)

NONLINEARITIES = {nl.name: nl for nl in (MODEL, SQRT_DAMPED)}


def get_nonlinearity(name: str) -> Nonlinearity:
    try:
        return NONLINEARITIES[name]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}; known: {sorted(NONLINEARITIES)}") from None


def _check_scale(scale: float) -> float:
    if not math.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be positive and finite, got {scale!r}")
    return float(scale)


def nonlinear_mass(u: SampledRadialFunction, nl: Nonlinearity = MODEL, scale: float = 1.0) -> float:
    """1/(8 pi) int_B F(u) dx for u = delta_{1/scale} of the samples.

    In deflated coordinates this is (s/4) int F(sqrt(s) W) exp(-2 s tau) dtau;
    beyond the last node W is held constant and the tail is added exactly.
    """
    s = _check_scale(scale)
    tau, W = u.t, u.values
    lF, sgn = nl.log_abs_F(math.sqrt(s) * W)
    lv = math.log(s / 4.0) - 2.0 * s * tau + lF
    body_log, body_sign = log_integrate_exp(ExponentField(u.grid, lv),
                                            SampledRadialFunction(u.grid, sgn))
    # int_{tau_max}^inf (s/4) F e^{-2 s tau} = F e^{-2 s tau_max} / 8
    tail_log = lF[-1] - 2.0 * s * tau[-1] - math.log(8.0)
    logs = [(body_log, body_sign), (tail_log, sgn[-1])]
    m = max(lg for lg, sg in logs if sg != 0.0) if any(sg != 0.0 for _, sg in logs) else -math.inf
    if m == -math.inf:
        return 0.0
    if m > LOG_FLOAT_MAX:
        raise OverflowError("nonlinear integral overflows: u exceeds the critical envelope")
    total = sum(sg * math.exp(lg - m) for lg, sg in logs if sg != 0.0)
    return total * math.exp(m)


def evaluate_J(u: SampledRadialFunction, nl: Nonlinearity = MODEL, scale: float = 1.0) -> float:
    """J(u) = 1/2 ||grad u||^2 - nonlinear_mass(u); the gradient term is scale invariant."""
    return 0.5 * dirichlet_energy(u) - nonlinear_mass(u, nl, scale)


def _flux_integral(u: SampledRadialFunction, nl: Nonlinearity, s: float):
    """H(tau) = s^{3/2} int_tau^inf g(sqrt(s) W) exp(s(4 pi W^2 - 2 sigma)) dsigma as (shift, values)."""
    tau, W = u.t, u.values
    lg, sg = nl.log_abs_g(math.sqrt(s) * W)
    lv = 1.5 * math.log(s) + lg + s * (FOUR_PI * W * W - 2.0 * tau)
    shift, cum = tail_integrate_exp(ExponentField(u.grid, lv), SampledRadialFunction(u.grid, sg))
    tail_log = lv[-1] - math.log(2.0 * s)
    if sg[-1] != 0.0 and np.isfinite(tail_log):
        if shift == 0.0 and not np.any(cum):
            shift = tail_log
        cum = cum + sg[-1] * math.exp(tail_log - shift)
    return shift, cum, (tail_log, sg[-1])


def ap_residual(
    u: SampledRadialFunction,
    nl: Nonlinearity = MODEL,
    scale: float = 1.0,
    deflated: bool = False,
) -> float:
    """int_0^1 | r u'(r) + int_0^r f(u) rho drho / (8 pi) |^2 r dr for u = delta_{1/s} W.

    In deflated coordinates this is int |-W'(tau) + H(tau)|^2 exp(-2 s tau) dtau
    with H as in :func:`_flux_integral`.  ``deflated=True`` replaces the weight by
    exp(-2 tau), i.e. measures the same defect in the L^2(B) norm of the
    deflated variable.  Cells use the midpoint rule with W' the cell slope.
    """
    s = _check_scale(scale)
    tau, W = u.t, u.values
    shift, C, (tail_log, tail_sign) = _flux_integral(u, nl, s)
    dtau = np.diff(tau)
    mid = 0.5 * (tau[:-1] + tau[1:])
    rate = 1.0 if deflated else s
    half_log_w = -rate * mid
    slope = np.diff(W) / dtau
    C_mid = 0.5 * (C[:-1] + C[1:])
    expo = shift + half_log_w
    live = C_mid != 0.0
    if np.any(expo[live] > LOG_FLOAT_MAX):
        raise OverflowError("criticality residual overflows: u exceeds the critical envelope")
    with np.errstate(under="ignore"):
        b = np.where(live, C_mid * np.exp(np.where(live, expo, 0.0)), 0.0)
        a = slope * np.exp(half_log_w)
    body = float(np.sum((b - a) ** 2 * dtau))
    tail = 0.0
    if tail_sign != 0.0:
        # H decays like exp(-2 s (tau - tau_max)) beyond the last node, W' = 0 there
        lt = 2.0 * tail_log - 2.0 * rate * tau[-1] - math.log(4.0 * s + 2.0 * rate)
        if lt > LOG_FLOAT_MAX:
            raise OverflowError("criticality residual tail overflows")
        tail = math.exp(lt)
    return body + tail


@dataclass(frozen=True)
class ConcentrationProfileReport:
    rho_values: list
    mass_fraction: list
    zero_function: bool = False

    def to_json(self) -> list:
        return [{"rho": r, "frac": f} for r, f in zip(self.rho_values, self.mass_fraction)]


def concentration_profile(
    u: SampledRadialFunction, rhos: Sequence[float], scale: float = 1.0
) -> ConcentrationProfileReport:
    """Fraction of ||grad u||^2 carried by the disk r < rho, for each rho in (0, 1)."""
    s = _check_scale(scale)
    rhos = [float(r) for r in rhos]
    if any(not 0.0 < r < 1.0 for r in rhos):
        raise ValueError("probe radii must lie in (0, 1)")
    tau, W = u.t, u.values
    dtau = np.diff(tau)
    cell = TWO_PI * np.diff(W) ** 2 / dtau
    total = float(np.sum(cell))
    if total == 0.0:
        return ConcentrationProfileReport(rhos, [0.0] * len(rhos), zero_function=True)
    outer = np.concatenate([[0.0], np.cumsum(cell)])  # energy in tau < tau_i
    fracs = []
    for rho in rhos:
        cut = -math.log(rho) / s
        if cut >= tau[-1]:
            fracs.append(0.0)
            continue
        k = int(np.searchsorted(tau, cut, side="right")) - 1
        inside_outer = outer[k] + cell[k] * (cut - tau[k]) / dtau[k]
        fracs.append(max(0.0, (total - inside_outer) / total))
    return ConcentrationProfileReport(rhos, fracs)


def diagnostics_json(u: SampledRadialFunction, nl: Nonlinearity = MODEL, scale: float = 1.0,
                     rhos: Sequence[float] = (math.exp(-1.0),)) -> dict:
    nm = nonlinear_mass(u, nl, scale)
    e = dirichlet_energy(u)
    return {
        "s": scale,
        "J": 0.5 * e - nm,
        "ap_residual": ap_residual(u, nl, scale),
        "nonlinear_mass": nm,
        "dirichlet": e,
        "mass_profile": concentration_profile(u, rhos, scale).to_json(),
    }
