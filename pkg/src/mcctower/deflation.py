"""Blow-up scale and profile recovery for concentrating radial sequences.

A tower is only defined up to dilation (delta_s mu_C is the tower of C/s),
so recovered profiles are put in a gauge: the outer ramp of the deflated
profile meets the envelope sqrt(tau/2pi) first at tau = 1.  For an iterate
whose outer ramp has slope B this gives s_hat = 1 / (2 pi B^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .closed_sets import Component, SignedClosedSet
from .logdomain import TWO_PI, LogGrid, SampledRadialFunction, dirichlet_energy
from .towers import build_tower, energy_closed_form, envelope

CAUCHY_THRESHOLD = 1e-2
CONTACT_TOL = 1e-4
ENVELOPE_REJECT = 1e-6
ENVELOPE_ERROR = 1e-4
FIT_TOL = 1e-3
MIN_TRIALS = 8
GAUGE_REACH = 0.5


class NoStabilizingScale(RuntimeError):
    """No trial scale makes the deflated iterates settle down."""


class EnvelopeViolation(ValueError):
    """|w| exceeds sqrt(t/2pi) by more than the tolerance: not a concentration profile."""


def mass_concentration_scale(u: SampledRadialFunction) -> float:
    """t at which half of 2 pi int U'^2 lies at larger t, i.e. inside r < exp(-t)."""
    cells = TWO_PI * np.diff(u.values) ** 2 / np.diff(u.t)
    total = float(np.sum(cells))
    if total == 0.0:
        raise NoStabilizingScale("iterate has no gradient mass")
    inner = np.cumsum(cells[::-1])[::-1]  # mass in cells k..end
    k = int(np.nonzero(inner >= 0.5 * total)[0][-1])
    return float(u.t[k])


def _outer_sign(u: SampledRadialFunction) -> float:
    nz = np.nonzero(u.values[1:])[0]
    if nz.size == 0:
        raise NoStabilizingScale("iterate vanishes identically")
    return float(np.sign(u.values[1 + nz[0]]))


def gauge_score(u: SampledRadialFunction, s: float, reach: float = GAUGE_REACH) -> float:
    """sup over tau in [0, reach] of |delta_s U(tau) - sign tau/sqrt(2pi)|.

    Evaluated at u's nodes plus tau = reach.  Stopping short of tau = 1 keeps
    the score blind to corrections living near the outermost set point.
    """
    sign = _outer_sign(u)
    edge = reach * s
    m = u.t < edge
    # the node set plus t = reach * s, read off with the last value held beyond t_max
    tau = np.append(u.t[m] / s, reach)
    W = np.append(u.values[m], float(u(edge))) / math.sqrt(s)
    return float(np.max(np.abs(W - sign * tau / math.sqrt(TWO_PI))))


def deflate_samples(u: SampledRadialFunction, s: float) -> SampledRadialFunction:
    """delta_s u on the nodes t_i / s: values U(t_i)/sqrt(s), no interpolation."""
    return SampledRadialFunction(LogGrid(u.t / s), u.values / math.sqrt(s))


@dataclass
class DeflationScan:
    trial_scales: list  # per iterate: coarse and zoomed trial scales
    trial_scores: list  # matching gauge scores
    s_hat: list
    profiles: list  # deflated samples per iterate
    cauchy_scores: list  # sup-distance of consecutive profiles on the window
    window: tuple

    @property
    def profile(self) -> SampledRadialFunction:
        return self.profiles[-1]

    def to_json(self) -> dict:
        return {"s_hat": self.s_hat, "cauchy_scores": self.cauchy_scores,
                "window": list(self.window),
                "trials": [{"scales": list(map(float, s)), "scores": list(map(float, c))}
                           for s, c in zip(self.trial_scales, self.trial_scores)]}


def _refine(u: SampledRadialFunction, trials: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    scores = np.array([gauge_score(u, s) for s in trials])
    best = int(np.argmin(scores))
    step = trials[1] / trials[0]
    return float(trials[best]), scores, step


def find_scale(u: SampledRadialFunction, trials: np.ndarray):
    """Best trial, a factor-10 zoom around it, then bounded minimisation in log s."""
    best, scores, step = _refine(u, trials)
    zoom = np.geomspace(best / step, best * step, 2 * MIN_TRIALS + 1)
    best_z, scores_z, step_z = _refine(u, zoom)
    res = minimize_scalar(lambda x: gauge_score(u, math.exp(x)),
                          bounds=(math.log(best_z / step_z), math.log(best_z * step_z)),
                          method="bounded", options={"xatol": 1e-12})
    s_hat = math.exp(res.x) if res.fun <= gauge_score(u, best_z) else best_z
    return s_hat, np.concatenate([trials, zoom]), np.concatenate([scores, scores_z])


def profile_distance(a: SampledRadialFunction, b: SampledRadialFunction, window: tuple) -> float:
    """sup |a - b| over the union of both node sets inside ``window``."""
    lo, hi = window
    pts = np.union1d(a.t, b.t)
    pts = np.union1d(pts[(pts >= lo) & (pts <= hi)], [lo, hi])
    return float(np.max(np.abs(a(pts) - b(pts))))


def scan(u_sequence: Sequence[SampledRadialFunction], window: tuple = (0.1, 10.0),
         threshold: float = CAUCHY_THRESHOLD, n_trials: int = MIN_TRIALS + 1) -> DeflationScan:
    """Recover s_hat and the deflated profile of each iterate.

    Trial scales are log-spaced from a tenth of the smallest to ten times the
    largest mass-concentration scale of the sequence.  Raises
    :class:`NoStabilizingScale` if the scales do not grow (no concentration)
    or the last two deflated iterates differ by more than ``threshold``.
    """
    if len(u_sequence) < 3:
        raise ValueError("need at least 3 iterates")
    lo, hi = window
    if not (0.0 < lo < hi < math.inf):
        raise ValueError("window must be compact in (0, inf)")
    if n_trials < MIN_TRIALS:
        raise ValueError(f"at least {MIN_TRIALS} trial scales are required")
    est = [mass_concentration_scale(u) for u in u_sequence]
    trials = np.geomspace(min(est) / 10.0, max(est) * 10.0, n_trials)
    s_hat, all_trials, all_scores, profiles = [], [], [], []
    for u in u_sequence:
        s, tr, sc = find_scale(u, trials)
        s_hat.append(s)
        all_trials.append(tr)
        all_scores.append(sc)
        profiles.append(deflate_samples(u, s))
    if any(b <= a * (1.0 + 1e-9) for a, b in zip(s_hat, s_hat[1:])):
        raise NoStabilizingScale(f"recovered scales {s_hat} do not grow: no concentration")
    cauchy = [profile_distance(a, b, window) for a, b in zip(profiles, profiles[1:])]
    if cauchy[-1] > threshold:
        raise NoStabilizingScale(
            f"deflated iterates do not settle: last sup-distance {cauchy[-1]:.3g} > {threshold:g}")
    return DeflationScan(all_trials, all_scores, s_hat, profiles, cauchy, (lo, hi))


# -- profile classification ----------------------------------------------------------


@dataclass
class Classification:
    accepted: bool
    set: Optional[SignedClosedSet]
    residual: float
    envelope_excess: float
    reason: str = ""
    energy: Optional[float] = None
    contact_runs: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"accepted": self.accepted, "residual": self.residual,
               "envelope_excess": self.envelope_excess, "reason": self.reason}
        if self.set is not None:
            out["set"] = self.set.to_json()
            out["energy"] = self.energy
        return out


def _fit_line(t: np.ndarray, w: np.ndarray):
    if t.size == 1:
        return float(w[0]), 0.0
    B, A = np.polyfit(t, w, 1)
    return float(A), float(B)


def _envelope_crossing(A: float, B: float, sign: float, near: float) -> float:
    """t > 0 where A + B t = sign sqrt(t/2pi), the root closest to ``near``."""
    k = 1.0 / math.sqrt(TWO_PI)
    if abs(B) < 1e-14:
        return TWO_PI * A * A
    # B x^2 - sign k x + A = 0 with x = sqrt(t)
    disc = k * k - 4.0 * A * B
    disc = max(disc, 0.0)
    roots = [(sign * k + r) / (2.0 * B) for r in (math.sqrt(disc), -math.sqrt(disc))]
    ts = [x * x for x in roots if x > 0.0]
    if not ts:
        return near
    return min(ts, key=lambda t: abs(t - near))


def classify_profile(
    w: SampledRadialFunction,
    contact_tol: float = CONTACT_TOL,
    fit_tol: float = FIT_TOL,
    point_tol: float = 1e-6,
    envelope_tol: float = ENVELOPE_REJECT,
) -> Classification:
    """Read off the signed set of a tower-shaped profile.

    Contact nodes (|w| within ``contact_tol`` of the envelope) are grouped
    into runs; a line is fitted on each gap between runs and the component
    endpoints are where the fitted lines meet the envelope.  A run whose two
    crossings agree to ``point_tol`` is a point.  The fit residual is the
    sup-distance from w to the tower of the recovered set.

    Envelope excess above ``envelope_tol`` rejects the profile; excess above
    max(1e-4, envelope_tol) is an error.  Raise ``envelope_tol`` only for
    inputs known to be perturbed.
    """
    t, vals = w.t, w.values
    env = envelope(t)
    excess = float(np.max(np.abs(vals) - env))
    if excess > max(ENVELOPE_ERROR, envelope_tol):
        raise EnvelopeViolation(f"|w| exceeds the envelope by {excess:.3g}")
    if excess > envelope_tol:
        return Classification(False, None, math.inf, excess,
                              f"envelope exceeded beyond {envelope_tol:g}")
    # near t = 0 everything is within contact_tol of the envelope; ignore that zone
    contact = (env > 10.0 * contact_tol) & (env - np.abs(vals) <= contact_tol)
    idx = np.nonzero(contact)[0]
    if idx.size == 0:
        return Classification(False, None, math.inf, excess, "no contact with the envelope")
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    runs = [(int(a), int(b)) for a, b in zip(np.r_[idx[0], idx[breaks + 1]], np.r_[idx[breaks], idx[-1]])]

    segs = []  # gap node ranges [i0, i1] between runs
    prev = 0
    for a, b in runs:
        segs.append((prev, a - 1))
        prev = b + 1
    segs.append((prev, len(t) - 1))
    lines = []
    for i0, i1 in segs:
        lines.append(_fit_line(t[i0:i1 + 1], vals[i0:i1 + 1]) if i1 >= i0 else None)

    comps = []
    for k, (a, b) in enumerate(runs):
        sign = float(np.sign(vals[a]))
        left, right = lines[k], lines[k + 1]
        t_lo = _envelope_crossing(*left, sign, t[a]) if left else float(t[a])
        t_hi = _envelope_crossing(*right, sign, t[b]) if right else float(t[b])
        if t_hi - t_lo <= point_tol * max(1.0, t_lo):
            mid = 0.5 * (t_lo + t_hi)
            comps.append(Component(mid, mid, int(sign)))
        else:
            comps.append(Component(t_lo, t_hi, int(sign)))
    try:
        cset = SignedClosedSet(comps)
        tower = build_tower(cset)
    except (ValueError, ArithmeticError) as exc:
        return Classification(False, None, math.inf, excess, f"inconsistent components: {exc}",
                              contact_runs=runs)
    # the piecewise fit is the tower of the recovered set itself
    residual = float(np.max(np.abs(vals - tower(t))))
    if residual > fit_tol:
        return Classification(False, None, residual, excess,
                              f"piecewise fit residual {residual:.3g} > {fit_tol:g}", contact_runs=runs)
    energy = energy_closed_form(tower).total
    return Classification(True, cset, residual, excess, energy=energy, contact_runs=runs)


def hausdorff_t(a: SignedClosedSet, b: SignedClosedSet) -> float:
    """Hausdorff distance in t between two finite unions of closed intervals."""

    def one_sided(x: SignedClosedSet, y: SignedClosedSet) -> float:
        spans = [(c.t_lo, c.t_hi) for c in y.ascending()]
        cand = []
        for c in x.ascending():
            cand += [c.t_lo, c.t_hi]
            for (p, q), (r, _) in zip(spans, spans[1:]):
                m = 0.5 * (q + r)
                if c.t_lo <= m <= c.t_hi:
                    cand.append(m)

        def dist(p):
            return min(0.0 if lo <= p <= hi else min(abs(p - lo), abs(p - hi)) for lo, hi in spans)

        return max(dist(p) for p in cand)

    return max(one_sided(a, b), one_sided(b, a))


@dataclass
class ExtractedProfile:
    scan: DeflationScan
    classification: Classification


def extract_profiles(u_sequence: Sequence[SampledRadialFunction], window: tuple = (0.1, 10.0),
                     max_profiles: int = 2, min_energy: float = 1e-2, **classify_kw) -> list:
    """Scan, classify, subtract the blown-up tower from every iterate, rescan.

    Each profile is classified on the deflated nodes t <= window[1], so more
    deeply concentrated bumps only enter as a small ramp.  Extraction stops
    after ``max_profiles``, when the last remainder carries less than
    ``min_energy`` of Dirichlet energy, when the remainder stops concentrating
    or when its profile is rejected.  Failures on the first profile raise.
    """
    out = []
    seq = list(u_sequence)
    for n in range(max_profiles):
        if n and dirichlet_energy(seq[-1]) < min_energy:
            break
        try:
            sc = scan(seq, window)
        except NoStabilizingScale:
            if n == 0:
                raise
            break
        m = sc.profile.t <= window[1]
        cl = classify_profile(SampledRadialFunction(LogGrid(sc.profile.t[m]), sc.profile.values[m]),
                              **classify_kw)
        if not cl.accepted:
            if n == 0:
                out.append(ExtractedProfile(sc, cl))
            break
        out.append(ExtractedProfile(sc, cl))
        tower = build_tower(cl.set)
        seq = [SampledRadialFunction(u.grid, u.values - math.sqrt(s) * tower(u.t / s))
               for u, s in zip(seq, sc.s_hat)]
    return out


__all__ = [
    "Classification", "DeflationScan", "EnvelopeViolation", "ExtractedProfile", "NoStabilizingScale",
    "classify_profile", "extract_profiles", "deflate_samples", "find_scale", "gauge_score", "hausdorff_t",
    "mass_concentration_scale", "profile_distance", "scan",
]
