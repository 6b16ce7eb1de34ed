"""Signed closed sets C+ u C- in (0, 1), stored in t = log(1/r) coordinates.

A set is a finite union of closed components ``[t_lo, t_hi]`` (points have
``t_lo == t_hi``) each carrying a sign.  Components are kept sorted by t
descending, i.e. by radius ascending, matching the usual enumeration of the
complementary gaps starting from r = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

MIN_GAP = 1e-9
MEASURE_TOL = 1e-12


class PositiveMeasureError(ValueError):
    """The set has positive measure; finite boundary approximation does not apply."""


@dataclass(frozen=True)
class Component:
    t_lo: float
    t_hi: float
    sign: int

    @property
    def is_point(self) -> bool:
        return self.t_lo == self.t_hi

    @property
    def r_measure(self) -> float:
        return _r_length(self.t_lo, self.t_hi)


@dataclass(frozen=True)
class Gap:
    """Open complementary interval (t_lo, t_hi); signs of the bounding components.

    ``sign_lo`` is None for the gap touching t = 0 (r = 1) and ``sign_hi`` is
    None for the unbounded gap (r -> 0), whose ``t_hi`` is ``math.inf``.
    """

    t_lo: float
    t_hi: float
    sign_lo: Optional[int]
    sign_hi: Optional[int]

    @property
    def r_length(self) -> float:
        return _r_length(self.t_lo, self.t_hi)

    @property
    def is_outer(self) -> bool:
        return self.t_lo == 0.0

    @property
    def is_inner(self) -> bool:
        return self.t_hi == math.inf

    @property
    def sigma(self) -> float:
        """sqrt(t_hi / t_lo); 1 for the unbounded gap and inf for the gap at r = 1."""
        if self.is_inner:
            return 1.0
        if self.is_outer:
            return math.inf
        return math.sqrt(self.t_hi / self.t_lo)

    @property
    def changes_sign(self) -> bool:
        return (self.sign_lo is not None and self.sign_hi is not None
                and self.sign_lo != self.sign_hi)


GapList = list  # list[Gap], ascending in t


def _r_length(t_lo: float, t_hi: float) -> float:
    if t_hi == math.inf:
        return math.exp(-t_lo)
    return math.exp(-t_lo) * -math.expm1(-(t_hi - t_lo))


def _check_sign(sign) -> int:
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign!r}")
    return int(sign)


class SignedClosedSet:
    """Canonical, immutable signed closed set."""

    __slots__ = ("components", "generator")

    def __init__(self, components: Iterable[Component], generator: Optional[dict] = None):
        comps = sorted(components, key=lambda c: -c.t_lo)
        if not comps:
            raise ValueError("the set C = C+ u C- must be nonempty")
        for c in comps:
            _check_sign(c.sign)
            if not (math.isfinite(c.t_lo) and math.isfinite(c.t_hi)):
                raise ValueError("component endpoints must be finite")
            if not 0.0 < c.t_lo <= c.t_hi:
                raise ValueError(f"invalid component [{c.t_lo}, {c.t_hi}]: need 0 < t_lo <= t_hi")
        for deep, shallow in zip(comps, comps[1:]):
            if deep.t_lo - shallow.t_hi < MIN_GAP:
                if deep.t_lo == shallow.t_lo and deep.is_point and shallow.is_point:
                    raise ValueError(f"duplicate point t={deep.t_lo}")
                if deep.sign != shallow.sign and deep.t_lo <= shallow.t_hi + MIN_GAP:
                    raise ValueError(
                        f"components of opposite sign touch or overlap near t={deep.t_lo}: "
                        "C+ and C- must be disjoint closed sets")
                raise ValueError(
                    f"components [{shallow.t_lo}, {shallow.t_hi}] and [{deep.t_lo}, {deep.t_hi}] "
                    f"overlap or are closer than {MIN_GAP}")
        self.components = tuple(comps)
        self.generator = generator

    # constructors ---------------------------------------------------------

    @classmethod
    def from_points(cls, t_values: Sequence[float], signs: Optional[Sequence[int]] = None):
        t_values = [float(t) for t in t_values]
        signs = [1] * len(t_values) if signs is None else list(signs)
        if len(signs) != len(t_values):
            raise ValueError("t_values and signs must have equal lengths")
        if len(set(t_values)) != len(t_values):
            raise ValueError("duplicate points")
        return cls(Component(t, t, _check_sign(s)) for t, s in zip(t_values, signs))

    @classmethod
    def from_intervals(cls, spans: Sequence[tuple]):
        comps = []
        for span in spans:
            lo, hi, sign = span
            comps.append(Component(float(lo), float(hi), _check_sign(sign)))
        return cls(comps)

    # queries -------------------------------------------------------------

    def __iter__(self):
        return iter(self.components)

    def __len__(self) -> int:
        return len(self.components)

    def __eq__(self, other) -> bool:
        return isinstance(other, SignedClosedSet) and self.components == other.components

    def __hash__(self) -> int:
        return hash(self.components)

    def __repr__(self) -> str:
        parts = [f"{'+' if c.sign > 0 else '-'}[{c.t_lo:g},{c.t_hi:g}]" for c in self.components]
        return f"SignedClosedSet({' '.join(parts)})"

    @property
    def t_min(self) -> float:
        """Outermost t (largest radius, sup C in r)."""
        return self.components[-1].t_lo

    @property
    def t_max(self) -> float:
        """Deepest t (smallest radius)."""
        return self.components[0].t_hi

    @property
    def is_point_set(self) -> bool:
        return all(c.is_point for c in self.components)

    @property
    def is_sign_definite(self) -> bool:
        return len({c.sign for c in self.components}) == 1

    def ascending(self) -> tuple[Component, ...]:
        return self.components[::-1]

    def endpoints(self) -> list[float]:
        """All distinct component endpoints, ascending in t (the tower's kinks)."""
        pts = []
        for c in self.ascending():
            pts.append(c.t_lo)
            if not c.is_point:
                pts.append(c.t_hi)
        return pts

    def r_measure(self) -> float:
        return sum(c.r_measure for c in self.components)

    def has_measure_zero(self) -> bool:
        """True for finite point sets and for Cantor-type generators (limit set)."""
        if self.generator is not None and self.generator.get("constructor") == "cantor":
            return True
        return self.r_measure() <= MEASURE_TOL

    def gaps(self) -> GapList:
        return gaps(self)

    # serialization -------------------------------------------------------

    def to_json(self) -> dict:
        out = {"intervals": [{"t_lo": c.t_lo, "t_hi": c.t_hi, "sign": c.sign}
                             for c in self.components]}
        if self.generator is not None:
            out["generator"] = dict(self.generator)
        return out

    @classmethod
    def from_json(cls, spec: dict) -> "SignedClosedSet":
        if not isinstance(spec, dict):
            raise ValueError("set specification must be a JSON object")
        ctor = spec.get("constructor")
        if ctor is None:
            allowed = {"intervals", "generator"}
            unknown = set(spec) - allowed
            if unknown or "intervals" not in spec:
                raise ValueError(f"bad set specification keys: {sorted(spec)}")
            spans = []
            for item in spec["intervals"]:
                if set(item) != {"t_lo", "t_hi", "sign"}:
                    raise ValueError(f"bad interval entry {item!r}")
                spans.append((item["t_lo"], item["t_hi"], item["sign"]))
            out = cls.from_intervals(spans)
            if "generator" in spec:
                out = cls(out.components, generator=dict(spec["generator"]))
            return out
        if ctor == "cantor":
            unknown = set(spec) - {"constructor", "t_lo", "t_hi", "depth", "coords"}
            if unknown:
                raise ValueError(f"unknown keys {sorted(unknown)}")
            return cantor_set(spec["t_lo"], spec["t_hi"], spec["depth"], spec.get("coords", "t"))
        if ctor == "points":
            unknown = set(spec) - {"constructor", "t", "sign"}
            if unknown:
                raise ValueError(f"unknown keys {sorted(unknown)}")
            return cls.from_points(spec["t"], spec.get("sign"))
        raise ValueError(f"unknown set constructor {ctor!r}")


def from_points(t_values, signs=None) -> SignedClosedSet:
    return SignedClosedSet.from_points(t_values, signs)


def from_intervals(spans) -> SignedClosedSet:
    return SignedClosedSet.from_intervals(spans)


def cantor_set(t_lo: float, t_hi: float, depth: int, coords: str = "t") -> SignedClosedSet:
    """Depth-``depth`` middle-thirds iterate on [t_lo, t_hi], all signs +1.

    ``coords="t"`` removes middle thirds in t; ``coords="r"`` removes them in
    the radius r = exp(-t) and converts the resulting endpoints back to t.
    """
    if not (0.0 < t_lo < t_hi < math.inf):
        raise ValueError(f"invalid span [{t_lo}, {t_hi}]")
    if int(depth) != depth or depth < 0:
        raise ValueError("depth must be a non-negative integer")
    if coords not in ("t", "r"):
        raise ValueError("coords must be 't' or 'r'")
    if coords == "t":
        lo, hi = float(t_lo), float(t_hi)
    else:
        lo, hi = math.exp(-t_hi), math.exp(-t_lo)
    spans = [(lo, hi)]
    for _ in range(int(depth)):
        nxt = []
        for a, b in spans:
            third = (b - a) / 3.0
            nxt.append((a, a + third))
            nxt.append((b - third, b))
        spans = nxt
    if coords == "r":
        spans = [(-math.log(b), -math.log(a)) for a, b in spans]
    gen = {"constructor": "cantor", "t_lo": float(t_lo), "t_hi": float(t_hi),
           "depth": int(depth), "coords": coords}
    return SignedClosedSet((Component(a, b, 1) for a, b in spans), generator=gen)


def gaps(cset: SignedClosedSet) -> GapList:
    """Connected components of (0, inf) minus C, ascending in t."""
    out = []
    prev_t, prev_sign = 0.0, None
    for c in cset.ascending():
        out.append(Gap(prev_t, c.t_lo, prev_sign, c.sign))
        prev_t, prev_sign = c.t_hi, c.sign
    out.append(Gap(prev_t, math.inf, prev_sign, None))
    return out


def finite_approximant(cset: SignedClosedSet, epsilon: float) -> SignedClosedSet:
    """Boundary points of a gap family of total r-length >= 1 - epsilon.

    Both boundary gaps are always taken; the remaining gaps are added in order
    of decreasing r-length until the threshold is reached.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if not cset.has_measure_zero():
        raise PositiveMeasureError(
            f"set has r-measure {cset.r_measure():.3g} > 0; use the interval construction")
    all_gaps = gaps(cset)
    chosen = [g for g in all_gaps if g.is_outer or g.is_inner]
    total = sum(g.r_length for g in chosen)
    rest = sorted((g for g in all_gaps if not (g.is_outer or g.is_inner)),
                  key=lambda g: (-g.r_length, g.t_lo))
    target = 1.0 - epsilon - MEASURE_TOL
    for g in rest:
        if total >= target:
            break
        chosen.append(g)
        total += g.r_length
    if total < target:
        raise ValueError(
            f"gaps of this set cover only {total:.6g} < 1 - epsilon; use a deeper iterate")
    points = {}
    for g in chosen:
        if not g.is_outer:
            points[g.t_lo] = g.sign_lo
        if not g.is_inner:
            points[g.t_hi] = g.sign_hi
    ts = sorted(points)
    return SignedClosedSet.from_points(ts, [points[t] for t in ts])


def kappa_bound(cset: SignedClosedSet, approximant: SignedClosedSet) -> float:
    """(2/sqrt(t_min)) * sum over gaps not kept by the approximant of (sqrt(t_hi) - sqrt(t_lo)).

    Components of positive length count as fully unselected (in the measure
    zero limit they are filled by gaps the approximant does not keep).
    """
    ends = set()
    for c in cset.components:
        ends.add(c.t_lo)
        ends.add(c.t_hi)
    for c in approximant.components:
        if not c.is_point or c.t_lo not in ends:
            raise ValueError("approximant is not a boundary-point approximant of this set")
    kept = {(g.t_lo, g.t_hi) for g in gaps(approximant)}
    total = 0.0
    for g in gaps(cset):
        if g.is_outer or g.is_inner or (g.t_lo, g.t_hi) in kept:
            continue
        total += math.sqrt(g.t_hi) - math.sqrt(g.t_lo)
    for c in cset.components:
        total += math.sqrt(c.t_hi) - math.sqrt(c.t_lo)
    return 2.0 / math.sqrt(cset.t_min) * total
