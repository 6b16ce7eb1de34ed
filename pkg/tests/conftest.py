import math

import numpy as np
import pytest

from mcctower.closed_sets import SignedClosedSet
from mcctower.towers import build_tower, design_level

SQRT_2PI = math.sqrt(2.0 * math.pi)


def moser(T: float):
    """Tower of the singleton {T}: min(t, T) / sqrt(2 pi T)."""
    return build_tower(SignedClosedSet.from_points([T]))


def random_signed_set(rng: np.random.Generator, max_components: int = 8, t_start=(0.5, 3.0),
                      interval_prob=0.4, nodal=None) -> SignedClosedSet:
    """Random mixture of points and intervals, consecutive components >= 0.05 apart.

    ``nodal=True`` forces at least one sign change, ``nodal=False`` forbids it.
    """
    k = int(rng.integers(2 if nodal else 1, max_components + 1))
    cuts = rng.uniform(*t_start) + np.cumsum(np.r_[0.0, rng.uniform(0.05, 4.0, 2 * k - 1)])
    spans = []
    for i in range(k):
        lo, hi = cuts[2 * i], cuts[2 * i + 1]
        spans.append((lo, hi) if rng.random() < interval_prob else (lo, lo))
    if nodal is False:
        signs = [1] * k
    else:
        signs = [int(x) for x in rng.choice([-1, 1], size=k)]
        if nodal and len(set(signs)) == 1:
            signs[int(rng.integers(0, k))] *= -1
    return SignedClosedSet.from_intervals([(lo, hi, s) for (lo, hi), s in zip(spans, signs)])


@pytest.fixture(scope="session")
def singleton():
    return SignedClosedSet.from_points([1.0])


@pytest.fixture(scope="session")
def two_points():
    return SignedClosedSet.from_points([4.0, 1.0])


@pytest.fixture(scope="session")
def interval_075():
    # c = 3/4: beta = e^2, a = 1/e, i.e. t in [1, e^2]
    return SignedClosedSet.from_intervals([(1.0, math.exp(2.0), 1)])


@pytest.fixture(scope="session")
def design_3_2():
    return design_level(3, 2.0)


@pytest.fixture(scope="session")
def sequences(singleton, design_3_2, interval_075):
    """Critical sequences at s = 1e2, 1e3, 1e4, with their deflated profiles."""
    from mcctower.critical_sequences import SequenceSpec, generate_sequence

    out = {}
    for name, cs in (("singleton", singleton), ("design", design_3_2), ("interval", interval_075)):
        out[name] = generate_sequence(SequenceSpec(cs), keep_profiles=True)
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
