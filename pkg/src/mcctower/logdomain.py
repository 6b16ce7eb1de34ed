"""Log-coordinate grids, sampled radial functions and stable quadrature.

A radial function ``u`` on the unit disk is stored through
``U(t) = u(exp(-t))`` with ``t = log(1/r)``.  In these coordinates

    ||grad u||^2   = 2*pi * int_0^inf U'(t)^2 dt
    int_B h(u) dx  = 2*pi * int_0^inf h(U(t)) exp(-2t) dt
    (delta_s U)(t) = s**-0.5 * U(s t)

so radii such as exp(-81) never have to be formed explicitly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.interpolate import PchipInterpolator

TWO_PI = 2.0 * math.pi
LOG_FLOAT_MAX = math.log(np.finfo(float).max)
R_UNDERFLOW_T = 700.0


class BracketError(ArithmeticError):
    """Root bracket exhausted (the function is too large or too small)."""


class LogGrid:
    """Strictly increasing t-nodes, t_min >= 0 (t = 0 is the unit circle)."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: Sequence[float]):
        nodes = np.array(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("a LogGrid needs at least 3 nodes")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("grid nodes must be finite")
        if nodes[0] < 0.0:
            raise ValueError("grid nodes must be non-negative")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        self.nodes = nodes

    def __len__(self) -> int:
        return self.nodes.size

    def __repr__(self) -> str:
        return f"LogGrid(n={len(self)}, t=[{self.t_min:g}, {self.t_max:g}])"

    @property
    def t_min(self) -> float:
        return float(self.nodes[0])

    @property
    def t_max(self) -> float:
        return float(self.nodes[-1])

    def contains_nodes(self, points: Sequence[float]) -> bool:
        """True if every point in ``points`` (inside the grid range) is a node."""
        pts = np.asarray(points, dtype=float)
        pts = pts[(pts >= self.t_min) & (pts <= self.t_max)]
        if pts.size == 0:
            return True
        idx = np.clip(np.searchsorted(self.nodes, pts), 0, len(self) - 1)
        lo = np.clip(idx - 1, 0, len(self) - 1)
        d = np.minimum(np.abs(self.nodes[idx] - pts), np.abs(self.nodes[lo] - pts))
        return bool(np.all(d <= 4 * np.spacing(np.maximum(pts, 1.0))))

    def with_points(self, points: Sequence[float]) -> "LogGrid":
        """Insert ``points`` as exact nodes, dropping nodes that would nearly coincide."""
        pts = np.unique(np.asarray(points, dtype=float))
        pts = pts[(pts >= 0.0) & np.isfinite(pts)]
        if pts.size == 0:
            return self
        nodes = self.nodes
        idx = np.searchsorted(pts, nodes)
        near = np.zeros(nodes.size, dtype=bool)
        for k in (idx - 1, idx):
            ok = (k >= 0) & (k < pts.size)
            kk = np.clip(k, 0, pts.size - 1)
            tol = 8 * np.spacing(np.maximum(pts[kk], 1.0))
            near |= ok & (np.abs(nodes - pts[kk]) <= tol)
        return LogGrid(np.union1d(nodes[~near], pts))


def make_uniform_grid(t_max: float, n: int) -> LogGrid:
    """Uniform grid with ``n`` nodes on ``[0, t_max]``."""
    if not (isinstance(t_max, (int, float)) and math.isfinite(t_max)) or t_max <= 0:
        raise ValueError(f"t_max must be finite and positive, got {t_max!r}")
    if int(n) != n or n < 3:
        raise ValueError(f"n must be an integer >= 3, got {n!r}")
    return LogGrid(np.linspace(0.0, float(t_max), int(n)))


def refined_grid(
    t_max: float,
    n: int,
    centers: Sequence[float] = (),
    h_min=1e-6,
    ratio: float = 1.05,
) -> LogGrid:
    """Uniform base grid plus geometric clusters of nodes around ``centers``.

    Spacing grows from ``h_min`` (a scalar or one value per center) by
    ``ratio`` per node until it reaches the base spacing.  Centers become
    exact nodes.
    """
    base = make_uniform_grid(t_max, n)
    h_base = t_max / (n - 1)
    centers = np.asarray(centers, dtype=float)
    h_mins = np.broadcast_to(np.asarray(h_min, dtype=float), centers.shape)
    keep = (centers >= 0.0) & (centers <= t_max)
    centers, h_mins = centers[keep], h_mins[keep]
    if centers.size == 0:
        return base
    extra = []
    for c, h in zip(centers, h_mins):
        h = min(max(h, 64 * np.spacing(max(c, 1.0))), h_base)
        k = max(1, int(math.ceil(math.log(h_base / h) / math.log(ratio))))
        offsets = np.cumsum(h * ratio ** np.arange(k))
        extra.append(c - offsets)
        extra.append(c + offsets)
    extra = np.concatenate(extra)
    extra = extra[(extra > 0.0) & (extra < t_max)]
    grid = LogGrid(np.union1d(base.nodes, extra))
    return grid.with_points(centers)


@dataclass(frozen=True, eq=False)
class SampledRadialFunction:
    """Values ``U(t_i)`` of a radial function on a :class:`LogGrid`.

    ``exact`` optionally carries a callable for ``U`` on all of ``[0, inf)``;
    operations that must look outside the stored nodes (dilation) use it
    instead of interpolating.
    """

    grid: LogGrid
    values: np.ndarray
    exact: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.grid),):
            raise ValueError("values must have one entry per grid node")
        if not np.all(np.isfinite(values)):
            raise ValueError("sampled values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, grid: LogGrid, fn: Callable) -> "SampledRadialFunction":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float), exact=fn)

    @classmethod
    def zeros(cls, grid: LogGrid) -> "SampledRadialFunction":
        return cls.from_callable(grid, lambda t: np.zeros_like(np.asarray(t, dtype=float)))

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes

    def __call__(self, t):
        """Evaluate U; beyond t_max the last value is held (u is constant near 0)."""
        if self.exact is not None:
            return self.exact(np.asarray(t, dtype=float))
        t = np.asarray(t, dtype=float)
        inner = PchipInterpolator(self.t, self.values, extrapolate=False)
        out = inner(np.clip(t, self.grid.t_min, self.grid.t_max))
        return np.where(t > self.grid.t_max, self.values[-1], out)

    def _combine(self, other, op):
        if isinstance(other, SampledRadialFunction):
            if other.grid is not self.grid and not np.array_equal(other.t, self.t):
                raise ValueError("functions live on different grids")
            exact = None
            if self.exact is not None and other.exact is not None:
                f, g = self.exact, other.exact
                exact = lambda t: op(f(t), g(t))  # noqa: E731
            return SampledRadialFunction(self.grid, op(self.values, other.values), exact)
        c = float(other)
        exact = None
        if self.exact is not None:
            f = self.exact
            exact = lambda t: op(f(t), c)  # noqa: E731
        return SampledRadialFunction(self.grid, op(self.values, c), exact)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, c):
        return self._combine(float(c), np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_csv(self, path, extra_columns: Optional[dict] = None) -> None:
        """Write ``t,r,value`` rows with round-trip float formatting."""
        extra_columns = extra_columns or {}
        header = ["t", "r", "value", *extra_columns]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, (t, v) in enumerate(zip(self.t, self.values)):
                r = 0.0 if t > R_UNDERFLOW_T else math.exp(-t)
                w.writerow([repr(float(t)), repr(r), repr(float(v)),
                            *(col[i] for col in extra_columns.values())])

    @classmethod
    def from_csv(cls, path) -> "SampledRadialFunction":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"t", "value"} <= set(rows[0]):
            raise ValueError(f"{path}: expected a CSV with columns t,r,value")
        t = [float(row["t"]) for row in rows]
        v = [float(row["value"]) for row in rows]
        return cls(LogGrid(t), np.array(v))


@dataclass(frozen=True, eq=False)
class ExponentField:
    """Log of a positive integrand on a grid, integrated as exp(log_values)."""

    grid: LogGrid
    log_values: np.ndarray
    scale_hint: float = 1.0

    def __post_init__(self):
        lv = np.array(self.log_values, dtype=float)
        if lv.shape != (len(self.grid),):
            raise ValueError("log_values must have one entry per grid node")
        if np.any(np.isnan(lv)) or np.any(lv == np.inf):
            raise ValueError("log_values must be finite or -inf")
        lv.setflags(write=False)
        object.__setattr__(self, "log_values", lv)


def logexpm1(x):
    """log(exp(x) - 1) for x >= 0, without overflow; -inf at x = 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        big = x > 30.0
        small = np.log(np.expm1(np.where(big, 0.0, x)))
        large = x + np.log1p(-np.exp(-np.where(big, x, 30.0)))
    return np.where(big, large, small)


def dirichlet_energy(u: SampledRadialFunction) -> float:
    """2*pi * int (U')^2 dt for the piecewise-linear interpolant of the samples.

    Exact for functions that are affine between nodes, which is the case for
    towers away from their sqrt pieces when kinks sit on nodes.
    """
    if len(u.grid) < 3:
        raise ValueError("need at least 3 nodes")
    dt = np.diff(u.t)
    du = np.diff(u.values)
    return float(TWO_PI * np.sum(du * du / dt))


def dirichlet_energy_with_error(u: SampledRadialFunction) -> tuple[float, float]:
    """Energy plus a Richardson estimate |E_h - E_2h| / 3 from the every-other-node subgrid."""
    e_h = dirichlet_energy(u)
    keep = np.arange(0, len(u.grid), 2)
    if keep[-1] != len(u.grid) - 1:
        keep = np.append(keep, len(u.grid) - 1)
    if keep.size < 3:
        return e_h, float("inf")
    coarse = SampledRadialFunction(LogGrid(u.t[keep]), u.values[keep])
    return e_h, abs(e_h - dirichlet_energy(coarse)) / 3.0


def _stable_terms(field: ExponentField, weight: Optional[SampledRadialFunction]):
    lv = field.log_values
    w = np.ones_like(lv) if weight is None else weight.values
    if weight is not None and len(weight.grid) != len(field.grid):
        raise ValueError("weight and exponent field must share a grid")
    live = (w != 0.0) & np.isfinite(lv)
    if not np.any(live):
        return -np.inf, np.zeros_like(lv)
    m = float(np.max(lv[live]))
    with np.errstate(under="ignore"):
        return m, np.where(live, np.exp(np.where(live, lv - m, 0.0)) * w, 0.0)


def log_integrate_exp(field: ExponentField, weight: Optional[SampledRadialFunction] = None):
    """Return ``(log|I|, sign(I))`` for ``I = int exp(log_values) * weight dt``."""
    m, terms = _stable_terms(field, weight)
    val = trapezoid(terms, field.grid.nodes)
    if val == 0.0 or m == -np.inf:
        return -np.inf, 0.0
    return m + math.log(abs(val)), math.copysign(1.0, val)


def integrate_exp(field: ExponentField, weight: Optional[SampledRadialFunction] = None) -> float:
    """Trapezoid quadrature of ``exp(log_values) * weight`` with max-subtraction.

    Raises OverflowError when the integral itself is not representable.
    """
    log_abs, sign = log_integrate_exp(field, weight)
    if sign == 0.0:
        return 0.0
    if log_abs > LOG_FLOAT_MAX:
        raise OverflowError(
            f"integral exp({log_abs:.4g}) overflows; the exponent is unbounded above "
            "on a set of positive length")
    return sign * math.exp(log_abs)


def tail_integrate_exp(field: ExponentField, weight: Optional[SampledRadialFunction] = None):
    """Right-cumulative integrals ``H_i = int_{t_i}^{t_max} exp(L) w dt``.

    Returned as ``(shift, values)`` with ``H = exp(shift) * values``; the shift
    keeps ``values`` of order one so callers can fold in further exponentials.
    """
    m, terms = _stable_terms(field, weight)
    if m == -np.inf:
        return 0.0, np.zeros_like(terms)
    cum = cumulative_trapezoid(terms, field.grid.nodes, initial=0.0)
    return m, cum[-1] - cum


def dilate(u: SampledRadialFunction, s: float) -> SampledRadialFunction:
    """delta_s u(r) = s**-1/2 u(r**s), i.e. (delta_s U)(t) = s**-1/2 U(s t), on u's grid.

    Uses ``u.exact`` when available (exact group law); otherwise monotone
    cubic interpolation of the samples with the last value held beyond t_max.
    """
    if not (isinstance(s, (int, float, np.floating)) and math.isfinite(s)) or s <= 0:
        raise ValueError(f"dilation parameter must be finite and positive, got {s!r}")
    s = float(s)
    if s == 1.0:
        return u
    amp = s ** -0.5
    if u.exact is not None:
        f = u.exact
        fn = lambda t: amp * f(s * np.asarray(t, dtype=float))  # noqa: E731
        return SampledRadialFunction.from_callable(u.grid, fn)
    return SampledRadialFunction(u.grid, amp * u(s * u.t))


def _modular(u: SampledRadialFunction, lam: float, scale: float) -> float:
    """2*pi * int expm1((U/lam)^2) e^{-2t} dt for U = delta_{1/scale} u, in u's coordinates."""
    s = scale
    v2 = s * (u.values / lam) ** 2
    lv = math.log(TWO_PI * s) - 2.0 * s * u.t + logexpm1(v2)
    try:
        body = integrate_exp(ExponentField(u.grid, lv))
        tail_log = (math.log(math.pi) - 2.0 * s * u.grid.t_max
                    + float(logexpm1(v2[-1])))
        tail = math.exp(tail_log) if tail_log < LOG_FLOAT_MAX else math.inf
    except OverflowError:
        return math.inf
    return body + tail


def orlicz_exp_l2_norm(
    u: SampledRadialFunction,
    scale: float = 1.0,
    rtol: float = 1e-8,
    bracket: tuple[float, float] = (1e-9, 1e3),
) -> float:
    """inf{lam > 0 : int_B (exp((u/lam)^2) - 1) dx <= 1}, by geometric bisection.

    With ``scale = s`` the samples are read as the deflated form of
    delta_{1/s} u and the norm of the blown-up function is returned.
    """
    if np.all(u.values == 0.0):
        return 0.0
    lo, hi = bracket
    if _modular(u, hi, scale) > 1.0:
        raise BracketError(f"Orlicz norm exceeds the bracket upper end {hi:g}")
    if _modular(u, lo, scale) <= 1.0:
        raise BracketError(f"Orlicz norm is below the bracket lower end {lo:g}")
    while hi / lo - 1.0 > rtol * 0.5:
        mid = math.sqrt(lo * hi)
        if _modular(u, mid, scale) > 1.0:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)
