"""Moser-Carleson-Chang towers.

The tower of a signed closed set equals +-sqrt(t/2pi) on the set components
and is affine in t on each complementary gap; it vanishes at t = 0 and is
constant beyond the deepest component.  Everything here is exact: pieces are
solved in closed form and the energy is a finite sum over gaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .closed_sets import SignedClosedSet, gaps
from .logdomain import LogGrid, SampledRadialFunction, TWO_PI, make_uniform_grid

SQRT_2PI = math.sqrt(TWO_PI)
CONTINUITY_TOL = 1e-12
DEFAULT_GRID_N = 2**18 + 1


def envelope(t):
    """sqrt(t / 2pi), the pointwise bound |U(t)| <= sqrt(t/2pi) for profiles."""
    return np.sqrt(np.asarray(t, dtype=float) / TWO_PI)


@dataclass(frozen=True)
class LinearPiece:
    t_lo: float
    t_hi: float
    A: float
    B: float

    kind = "linear"

    def __call__(self, t):
        return self.A + self.B * np.asarray(t, dtype=float)

    def slope(self, t: float) -> float:
        return self.B


@dataclass(frozen=True)
class SqrtPiece:
    t_lo: float
    t_hi: float
    sign: int

    kind = "sqrt"

    def __call__(self, t):
        return self.sign * envelope(t)

    def slope(self, t: float) -> float:
        return self.sign / (2.0 * math.sqrt(TWO_PI * t))


Piece = Union[LinearPiece, SqrtPiece]


@dataclass(frozen=True)
class EnergyBreakdown:
    set_term: float
    same_sign_terms: list
    sign_change_terms: list
    total: float

    def to_json(self) -> dict:
        return {"set_term": self.set_term, "same_sign": list(self.same_sign_terms),
                "sign_change": list(self.sign_change_terms), "total": self.total}


@dataclass(frozen=True, eq=False)
class TowerProfile:
    set: SignedClosedSet
    pieces: tuple
    _starts: np.ndarray = field(repr=False)
    _kind: np.ndarray = field(repr=False)
    _A: np.ndarray = field(repr=False)
    _B: np.ndarray = field(repr=False)

    def __call__(self, t):
        return evaluate(self, t)

    @property
    def kinks(self) -> list:
        return self.set.endpoints()

    @property
    def t_deepest(self) -> float:
        return self.set.t_max

    def default_grid(self, n: int = DEFAULT_GRID_N, t_max: float | None = None) -> LogGrid:
        """Uniform grid on [0, 2*t_deepest + 10] with every kink inserted as a node."""
        if t_max is None:
            t_max = 2.0 * self.t_deepest + 10.0
        return make_uniform_grid(t_max, n).with_points(self.kinks)

    def slopes_at(self, t: float) -> tuple[float, float]:
        """One-sided derivatives (U'(t-), U'(t+)) at a node t."""
        left = right = None
        for p in self.pieces:
            if p.t_lo < t <= p.t_hi:
                left = p.slope(t)
            if p.t_lo <= t < p.t_hi:
                right = p.slope(t)
        return left, right


def _segment(t_a: float, v_a: float, t_b: float, v_b: float) -> LinearPiece:
    B = (v_b - v_a) / (t_b - t_a)
    return LinearPiece(t_a, t_b, v_a - B * t_a, B)


def build_tower(cset: SignedClosedSet) -> TowerProfile:
    """Piecewise representation of the tower, ascending in t."""
    pieces: list[Piece] = []
    comps = cset.ascending()
    first = comps[0]
    v_first = first.sign * math.sqrt(first.t_lo / TWO_PI)
    pieces.append(LinearPiece(0.0, first.t_lo, 0.0, v_first / first.t_lo))
    for i, c in enumerate(comps):
        if not c.is_point:
            pieces.append(SqrtPiece(c.t_lo, c.t_hi, c.sign))
        if i + 1 < len(comps):
            nxt = comps[i + 1]
            v_a = c.sign * math.sqrt(c.t_hi / TWO_PI)
            v_b = nxt.sign * math.sqrt(nxt.t_lo / TWO_PI)
            pieces.append(_segment(c.t_hi, v_a, nxt.t_lo, v_b))
    last = comps[-1]
    pieces.append(LinearPiece(last.t_hi, math.inf, last.sign * math.sqrt(last.t_hi / TWO_PI), 0.0))

    for p, q in zip(pieces, pieces[1:]):
        t = p.t_hi
        a, b = float(p(t)), float(q(t))
        if abs(a - b) > CONTINUITY_TOL * max(1.0, abs(a)):
            raise ArithmeticError(f"tower discontinuous at t={t}: {a} vs {b}")

    starts = np.array([p.t_lo for p in pieces])
    kind = np.array([1 if p.kind == "sqrt" else 0 for p in pieces])
    A = np.array([p.sign if p.kind == "sqrt" else p.A for p in pieces], dtype=float)
    B = np.array([0.0 if p.kind == "sqrt" else p.B for p in pieces], dtype=float)
    return TowerProfile(cset, tuple(pieces), starts, kind, A, B)


def evaluate(tower: TowerProfile, t):
    """Exact piecewise value U(t); scalar in, scalar out."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0) or np.any(np.isnan(arr)):
        raise ValueError("t must be non-negative")
    idx = np.searchsorted(tower._starts, arr, side="right") - 1
    idx = np.clip(idx, 0, len(tower.pieces) - 1)
    lin = tower._A[idx] + tower._B[idx] * arr
    out = np.where(tower._kind[idx] == 1, tower._A[idx] * np.sqrt(arr / TWO_PI), lin)
    # B = 0 on the deepest piece; avoid inf * 0 for t = inf
    out = np.where(np.isinf(arr), tower._A[-1], out)
    return float(out) if out.ndim == 0 else out


def energy_closed_form(tower: TowerProfile) -> EnergyBreakdown:
    """||grad mu||^2 as set term plus one term per complementary gap."""
    set_term = sum(0.25 * math.log(c.t_hi / c.t_lo) for c in tower.set.components)
    same, change = [], []
    for g in gaps(tower.set):
        if g.is_outer:
            same.append(1.0)
        elif g.is_inner:
            same.append(0.0)
        else:
            ra, rb = math.sqrt(g.t_lo), math.sqrt(g.t_hi)
            if g.changes_sign:
                change.append((rb + ra) / (rb - ra))
            else:
                same.append((rb - ra) / (rb + ra))
    total = set_term + sum(same) + sum(change)
    return EnergyBreakdown(set_term, same, change, total)


def count_zeros(tower: TowerProfile) -> int:
    """Number of interior zeros: one per sign-changing affine piece."""
    return sum(1 for g in gaps(tower.set) if g.changes_sign)


def zeros(tower: TowerProfile) -> list[float]:
    out = []
    for p in tower.pieces:
        if p.kind == "linear" and p.B != 0.0 and p.t_lo > 0.0:
            t0 = -p.A / p.B
            if p.t_lo < t0 < p.t_hi:
                out.append(t0)
    return out


def kink_fluxes(tower: TowerProfile) -> list[tuple[float, float]]:
    """(t, U'(t-) - U'(t+)) at every component endpoint, ascending in t."""
    out = []
    for t in tower.kinks:
        left, right = tower.slopes_at(t)
        out.append((t, left - right))
    return out


def flux_jumps(tower: TowerProfile) -> list[tuple[float, float]]:
    """Jumps q_j of -dU/dt at the set points, deepest point first.

    With these, int_0^1 mu'(r) phi'(r) r dr = sum_j q_j phi(a_j) for radial
    test functions phi.
    """
    if not tower.set.is_point_set:
        raise ValueError("flux jumps are defined here for finite point sets only")
    return sorted(kink_fluxes(tower), key=lambda tq: -tq[0])


def flux_jumps_formula(cset: SignedClosedSet) -> list[tuple[float, float]]:
    """Closed-form q_j for a positive finite set with alpha_j = sqrt(t_j), deepest first.

    q_j = (alpha_{j-1} - alpha_{j+1}) / (sqrt(2pi) (alpha_j + alpha_{j+1})(alpha_j + alpha_{j-1}))
    with alpha_0 = inf (the r = 0 side) and alpha_{n+1} = 0 (r = 1).
    """
    if not cset.is_point_set or any(c.sign != 1 for c in cset):
        raise ValueError("formula applies to positive finite point sets")
    alpha = [math.inf] + [math.sqrt(c.t_lo) for c in cset.components] + [0.0]
    out = []
    for j in range(1, len(alpha) - 1):
        a_prev, a, a_next = alpha[j - 1], alpha[j], alpha[j + 1]
        if math.isinf(a_prev):
            q = 1.0 / (a + a_next)
        else:
            q = (a_prev - a_next) / ((a + a_next) * (a + a_prev))
        out.append((cset.components[j - 1].t_lo, q / SQRT_2PI))
    return out


def design_level(n: int, target: float, t_outer: float = 1.0) -> SignedClosedSet:
    """n positive points whose tower has energy ``target`` in (1, n).

    All n-1 interior gaps get the ratio gamma with
    (gamma - 1)/(gamma + 1) = (target - 1)/(n - 1); the outermost point sits
    at t = t_outer and t_j = gamma^2 t_{j+1} going inwards.
    """
    if int(n) != n or n < 2:
        raise ValueError("n must be an integer >= 2")
    if not 1.0 < target < n:
        raise ValueError(f"target level must lie in (1, {n}), got {target}")
    x = (target - 1.0) / (n - 1.0)
    gamma = (1.0 + x) / (1.0 - x)
    ts = [float(t_outer)]
    for _ in range(int(n) - 1):
        ts.append(ts[-1] * gamma * gamma)
    if not math.isfinite(ts[-1]):
        raise OverflowError("designed points overflow in t; level too close to n")
    return SignedClosedSet.from_points(ts)


def sample(tower: TowerProfile, grid: LogGrid) -> SampledRadialFunction:
    """Exact tower values at the grid nodes; kinks must be nodes."""
    if grid.t_min != 0.0 or grid.t_max <= tower.t_deepest:
        raise ValueError(
            f"grid [{grid.t_min:g}, {grid.t_max:g}] must start at 0 and extend past "
            f"the deepest set point t={tower.t_deepest:g}")
    if not grid.contains_nodes(tower.kinks):
        raise ValueError("tower kinks must be grid nodes; use grid.with_points(tower.kinks)")
    return SampledRadialFunction.from_callable(grid, tower)


def piece_kinds(tower: TowerProfile, t) -> list[str]:
    idx = np.clip(np.searchsorted(tower._starts, np.asarray(t), side="right") - 1,
                  0, len(tower.pieces) - 1)
    return [tower.pieces[i].kind for i in idx]


def export_csv(tower: TowerProfile, grid: LogGrid, path) -> SampledRadialFunction:
    u = sample(tower, grid)
    u.to_csv(path, extra_columns={"piece_kind": piece_kinds(tower, grid.nodes)})
    return u


def energy_report(tower: TowerProfile, grid: LogGrid | None = None) -> dict:
    """Closed-form breakdown plus the quadrature cross-check."""
    from .logdomain import dirichlet_energy

    br = energy_closed_form(tower)
    grid = grid or tower.default_grid()
    quad = dirichlet_energy(sample(tower, grid))
    out = br.to_json()
    out["quadrature_total"] = quad
    out["rel_err"] = abs(quad - br.total) / br.total
    return out


def dump_energy_report(report: dict) -> str:
    return json.dumps(report, indent=2)
