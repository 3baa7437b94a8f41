from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from ldq.network import counting_network
from ldq.paths import PiecewisePath, StepPath

settings.register_profile("ldq", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("ldq")


def random_piecewise(rng: np.random.Generator, T: float = 2.0, pieces: int = 5,
                     max_slope: float = 3.0, start: float = 0.0) -> PiecewisePath:
    """Nondecreasing piecewise-linear path on ``[0, T]`` with random slopes."""
    inner = np.sort(rng.uniform(0, T, pieces - 1))
    times = np.concatenate([[0.0], inner, [T]])
    slopes = rng.uniform(0, max_slope, pieces)
    slopes[rng.random(pieces) < 0.2] = 0.0
    vals = start + np.concatenate([[0.0], np.cumsum(slopes * np.diff(times))])
    return PiecewisePath(times, vals, float(slopes[-1]))


def random_step(rng: np.random.Generator, T: float = 2.0, jumps: int = 6,
                n: int | None = None) -> StepPath:
    if n is None:
        times = np.sort(rng.uniform(0, T, jumps))
        return StepPath(times, rng.uniform(0.1, 1.0, jumps), 0.0, T)
    times = np.sort(rng.integers(1, int(T * n) + 1, jumps)) / n
    return StepPath(times, None, 0.0, T, n=n)


def random_counting_net(rng: np.random.Generator, K: int | None = None, n: int | None = None,
                        max_events: int = 1000):
    """Scaled counting network with deliberate time ties and random routing.

    Event times sit on a lattice of spacing ``1/(4n)`` so that arrivals and
    service ticks often coincide.
    """
    K = int(rng.integers(1, 5)) if K is None else K
    n = int(rng.integers(5, 40)) if n is None else n
    T = float(rng.uniform(1.0, 3.0))
    lattice = int(4 * n * T)
    budget = max_events // (2 * K)
    arrivals, ticks = [], []
    exo = rng.random(K) < 0.6
    exo[0] = True
    for i in range(K):
        m = int(rng.integers(0, budget + 1)) if exo[i] else 0
        arrivals.append(np.sort(rng.integers(1, lattice + 1, m)) / (4 * n))
        m = int(rng.integers(1, budget + 1))
        ticks.append(np.sort(rng.integers(1, lattice + 1, m)) / (4 * n))
    R = rng.uniform(0, 1, (K, K + 1))
    R[:, K] += 0.5
    R /= R.sum(axis=1, keepdims=True)
    decisions = [rng.choice(K + 1, size=len(ticks[i]) + 1, p=R[i]) for i in range(K)]
    return counting_network(ticks, arrivals, decisions, n, T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_pl_net(rng: np.random.Generator, K: int | None = None, T: float = 2.0, pieces: int = 3,
                  row_mass: float = 0.8):
    """Piecewise-linear network with routing slopes of row mass at most ``row_mass``."""
    from ldq.network import NetworkPaths
    from ldq.paths import RoutingPath, VectorPath

    K = int(rng.integers(1, 4)) if K is None else K
    S = [random_piecewise(rng, T, pieces, 3.0) for _ in range(K)]
    for s in S:
        s.tail_slope = max(s.tail_slope, 0.0)
    exo = [0] + [i for i in range(1, K) if rng.random() < 0.5]
    N = [random_piecewise(rng, T, pieces, 2.0) if i in exo else
         PiecewisePath([0.0, T], [0.0, 0.0], 0.0) for i in range(K)]
    U = max(float(s.eval(T)) for s in S) + 1.0
    entries = []
    for i in range(K):
        inner = np.sort(rng.uniform(0, U, pieces - 1))
        knots = np.concatenate([[0.0], inner, [U]])
        slopes = rng.uniform(0, 1, (pieces, K)) * (rng.random((pieces, K)) < 0.7)
        slopes *= rng.uniform(0, row_mass, (pieces, 1)) / np.maximum(slopes.sum(axis=1, keepdims=True), 1e-12)
        row = []
        for j in range(K):
            vals = np.concatenate([[0.0], np.cumsum(slopes[:, j] * np.diff(knots))])
            row.append(PiecewisePath(knots, vals, float(slopes[-1, j])))
        entries.append(row)
    return NetworkPaths(VectorPath(S), RoutingPath(entries), VectorPath(N), tuple(exo))
