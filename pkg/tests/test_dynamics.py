from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldq.dynamics import (check_phi_structure, counts_at, gamma, phi1, picard_counting, picard_paths,
                          reflect1d, residual_G, shift_restart, solve_counting, solve_linear,
                          solve_piecewise_linear)
from ldq.errors import ValidationError
from ldq.montecarlo import counterexample
from ldq.network import NetworkPaths, counting_network, fluid_network
from ldq.paths import (Path, PiecewisePath, RoutingPath, StepPath, VectorPath, combine, linear_path,
                       modulus, sup_distance)

from conftest import random_counting_net, random_piecewise, random_pl_net, random_step


def signed_path(rng, T=2.0, pieces=6):
    a = random_piecewise(rng, T, pieces, 2.0)
    b = random_piecewise(rng, T, pieces, 2.0)
    return combine(a, b, -1.0)


# -- reflection and departure map ------------------------------------------

def test_reflect_examples():
    x = linear_path(1.0, 2.0)
    assert sup_distance(reflect1d(x), x, 2.0) == 0.0
    down = combine(linear_path(0.0, 2.0), x, -1.0)
    assert sup_distance(reflect1d(down), linear_path(0.0, 2.0), 2.0) == 0.0
    tent = Path(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 0.0]), None, -1.0)
    r = reflect1d(tent)
    assert r.eval(0.5) == pytest.approx(0.5)
    assert r.eval(1.5) == pytest.approx(0.5)


def test_phi_concave_examples():
    s = linear_path(1.0, 3.0)
    assert sup_distance(phi1(linear_path(2.0, 3.0), s), s, 3.0) <= 1e-15
    half = linear_path(0.5, 3.0)
    assert sup_distance(phi1(half, s), half, 3.0) <= 1e-15


def test_phi_step_arrival():
    a = StepPath([0.5], horizon=3.0)
    d = phi1(a, linear_path(1.0, 3.0))
    for t in (0.0, 0.3, 0.5, 0.9, 1.5, 2.7):
        want = 0.0 if t < 0.5 else min(t - 0.5, 1.0)
        assert d.eval(t) == pytest.approx(want, abs=1e-15)


def test_phi_requires_service_from_zero():
    with pytest.raises(ValidationError):
        phi1(linear_path(1.0, 1.0), linear_path(1.0, 1.0, intercept=0.5))


def test_gamma_examples():
    T = 2.0
    N = VectorPath([linear_path(1.0, T)])
    zero = RoutingPath([[linear_path(0.0, 5.0)]])
    D = VectorPath([linear_path(1.0, T)])
    assert sup_distance(gamma(D, zero, N), N, T) == 0.0
    half = RoutingPath([[linear_path(0.5, 5.0)]])
    assert sup_distance(gamma(D, half, N), VectorPath([linear_path(1.5, T)]), T) <= 1e-15
    P = RoutingPath([[linear_path(0.0, 5.0), linear_path(1.0, 5.0)],
                     [linear_path(0.0, 5.0), linear_path(0.0, 5.0)]])
    N2 = VectorPath([linear_path(1.0, T), linear_path(0.0, T)])
    D2 = VectorPath([linear_path(1.0, T), linear_path(0.0, T)])
    A2 = gamma(D2, P, N2)
    assert sup_distance(A2, VectorPath([linear_path(1.0, T), linear_path(1.0, T)]), T) <= 1e-15


@given(st.integers(0, 100_000))
def test_reflection_is_two_lipschitz(seed):
    rng = np.random.default_rng(seed)
    x, y = signed_path(rng), signed_path(rng)
    lhs = sup_distance(reflect1d(x), reflect1d(y), 2.0)
    assert lhs <= 2.0 * sup_distance(x, y, 2.0) + 1e-12


@given(st.integers(0, 100_000), st.floats(0.01, 1.0))
def test_departure_modulus_bounded_by_service(seed, delta):
    rng = np.random.default_rng(seed)
    a = random_step(rng) if seed % 3 == 0 else random_piecewise(rng)
    s = random_piecewise(rng, 2.0, 5, 3.0)
    assert modulus(phi1(a, s), delta, 2.0) <= modulus(s, delta, 2.0) + 1e-12


@given(st.integers(0, 100_000))
def test_departure_map_monotone_in_arrivals(seed):
    rng = np.random.default_rng(seed)
    a = random_piecewise(rng)
    extra = random_step(rng) if seed % 2 else random_piecewise(rng)
    a2 = combine(a, extra, 1.0)
    s = random_piecewise(rng, 2.0, 5, 3.0)
    d, d2 = phi1(a, s), phi1(a2, s)
    t = np.unique(np.concatenate([d.t, d2.t]))
    assert np.all(np.asarray(d2.eval(t)) >= np.asarray(d.eval(t)) - 1e-12)


@given(st.integers(0, 100_000))
def test_departures_below_arrivals_and_service(seed):
    rng = np.random.default_rng(seed)
    a = random_step(rng) if seed % 2 else random_piecewise(rng)
    s = random_step(rng) if seed % 3 == 0 else random_piecewise(rng, 2.0, 5, 3.0)
    d = phi1(a, s)
    t = np.unique(np.concatenate([a.t, s.t, d.t]))
    dv = np.asarray(d.eval(t))
    assert np.all(dv <= np.asarray(a.eval(t)) + 1e-12)
    assert np.all(dv <= np.asarray(s.eval(t)) + 1e-12)
    assert d.eval(0.0) == 0.0


def _random_routing(rng, K, U, pieces=3):
    entries = []
    for _ in range(K):
        knots = np.concatenate([[0.0], np.sort(rng.uniform(0, U, pieces - 1)), [U]])
        slopes = rng.uniform(0, 1, (pieces, K))
        slopes *= rng.uniform(0, 1, (pieces, 1)) / slopes.sum(axis=1, keepdims=True)
        entries.append([PiecewisePath(knots, np.concatenate([[0.0], np.cumsum(slopes[:, j] * np.diff(knots))]),
                                      float(slopes[-1, j])) for j in range(K)])
    return RoutingPath(entries)


@given(st.integers(0, 100_000), st.integers(1, 3), st.floats(0.01, 0.5))
def test_gamma_modulus_bound(seed, K, delta):
    rng = np.random.default_rng(seed)
    T = 2.0
    D = VectorPath([random_piecewise(rng, T, 4, 3.0) for _ in range(K)])
    N = VectorPath([random_piecewise(rng, T, 4, 2.0) for _ in range(K)])
    P = _random_routing(rng, K, 3.0 * T + 1.0)
    lhs = modulus(gamma(D, P, N), delta, T)
    rhs = modulus(N, delta, T)
    for j in range(K):
        w = modulus(D[j], delta, T)
        if w > 0:
            rhs += modulus(VectorPath(list(P.row(j))), w, float(D[j].eval(T)))
    assert lhs <= rhs + 1e-12


@given(st.integers(0, 100_000), st.floats(0.01, 0.5))
def test_gamma_modulus_bound_for_unit_speed_departures(seed, delta):
    rng = np.random.default_rng(seed)
    T = 2.0
    D = VectorPath([random_piecewise(rng, T, 4, 1.0)])
    N = VectorPath([random_piecewise(rng, T, 4, 2.0)])
    P = _random_routing(rng, 1, T + 1.0)
    lhs = modulus(gamma(D, P, N), delta, T)
    rhs = modulus(N, delta, T) + modulus(VectorPath(list(P.row(0))), delta, float(D[0].eval(T)))
    assert lhs <= rhs + 1e-12


@given(st.integers(0, 100_000))
def test_gamma_monotone_in_departures(seed):
    rng = np.random.default_rng(seed)
    K, T = 2, 2.0
    D = VectorPath([random_piecewise(rng, T, 4, 1.0) for _ in range(K)])
    D2 = VectorPath([combine(d, random_piecewise(rng, T, 3, 1.0), 1.0) for d in D])
    N = VectorPath([random_piecewise(rng, T, 4, 1.0) for _ in range(K)])
    P = _random_routing(rng, K, 5.0)
    A, A2 = gamma(D, P, N), gamma(D2, P, N)
    grid = np.linspace(0, T, 101)
    for a, b in zip(A, A2):
        assert np.all(np.asarray(b.eval(grid)) >= np.asarray(a.eval(grid)) - 1e-12)


# -- counting networks -------------------------------------------------------

def test_counting_empty_system():
    net = counting_network([[0.5, 1.0]], [[]], [[1, 1, 1]], n=1, horizon=2.0)
    sol = solve_counting(net)
    assert sol.A[0].eval(2.0) == 0 and sol.D[0].eval(2.0) == 0


def test_counting_hand_simulated():
    net = counting_network([[0.5, 1.5, 2.5, 3.5]], [[1, 2, 3]], [[1, 1, 1, 1, 1]], n=1, horizon=4.0)
    sol = solve_counting(net)
    jt, _ = sol.D[0].jumps()
    assert jt.tolist() == [1.5, 2.5, 3.5]
    assert residual_G(net, sol.A, sol.D, 4.0) == 0


def test_counting_tie_serves_same_instant_arrival():
    net = counting_network([[1.0]], [[1.0]], [[1, 1]], n=1, horizon=2.0)
    sol = solve_counting(net)
    assert sol.D[0].eval(1.0) == 1
    assert residual_G(net, sol.A, sol.D, 2.0) == 0


def test_residual_detects_perturbation():
    net = counting_network([[0.5, 1.5, 2.5, 3.5]], [[1, 2, 3]], [[1, 1, 1, 1, 1]], n=1, horizon=4.0)
    sol = solve_counting(net)
    bump = StepPath([1.0], [0.1], 0.0, 4.0)
    D = VectorPath([combine(sol.D[0], bump, 1.0)])
    assert residual_G(net, sol.A, D, 4.0) >= 0.1


def test_counterexample_first_case_tracks_arrivals():
    res = counterexample(100, 0.5, 0.5)
    n = 100
    assert sup_distance(res.sol1.D, res.net1.N, 2.0) <= 10.0 / n


@given(st.integers(0, 100_000))
def test_counting_solver_matches_integer_picard(seed):
    rng = np.random.default_rng(seed)
    net = random_counting_net(rng, max_events=300)
    a, b = solve_counting(net), picard_counting(net)
    T = a.horizon
    assert residual_G(net, a.A, a.D, T) == 0
    grid = np.unique(np.concatenate([p.t for p in list(net.S) + list(net.N) + list(a.A) + list(a.D)]))
    for x, y in zip(list(a.A) + list(a.D), list(b.A) + list(b.D)):
        assert np.array_equal(counts_at(x, grid), counts_at(y, grid))
    Q = [counts_at(x, grid) - counts_at(y, grid) for x, y in zip(a.A, a.D)]
    assert all(np.all(q >= 0) for q in Q)


# -- linear and piecewise-linear networks -----------------------------------

def test_solve_linear_overloaded():
    sol = solve_linear([1.0], [[0.5]], [0.0], [2.0], 3.0)
    for t in (0.5, 1.0, 3.0):
        assert sol.A[0].eval(t) == pytest.approx(2.5 * t, abs=1e-9)
        assert sol.D[0].eval(t) == pytest.approx(t, abs=1e-9)


def test_solve_linear_underloaded():
    sol = solve_linear([1.0], [[0.5]], [0.0], [0.2], 3.0)
    for t in (0.5, 1.0, 3.0):
        assert sol.A[0].eval(t) == pytest.approx(0.4 * t, abs=1e-9)
        assert sol.D[0].eval(t) == pytest.approx(0.4 * t, abs=1e-9)


def test_solve_linear_no_service():
    sol = solve_linear([0.0, 0.0], [[0, 0.5], [0, 0]], [1.0, 0.5], [1.0, 0.0], 2.0)
    for t in (0.0, 1.0, 2.0):
        assert np.allclose(sol.D.eval(t), 0.0, atol=1e-12)
        assert np.allclose(sol.A.eval(t), [1.0 + t, 0.5], atol=1e-9)


def test_solve_linear_rejects_unstable_routing():
    with pytest.raises(ValidationError):
        solve_linear([1.0, 1.0], [[0, 1.0], [1.0, 0]], [0, 0], [1, 0], 1.0)


def test_shift_restart_examples():
    A, S = linear_path(2.0, 3.0), linear_path(1.0, 3.0)
    D = phi1(A, S)
    assert shift_restart(A, S, D, 0.0) == (A, S)
    At, St = shift_restart(A, S, D, 1.0)
    assert At.eval(0.0) == pytest.approx(1.0)
    assert At.eval(1.0) == pytest.approx(3.0)
    assert sup_distance(phi1(At, St), linear_path(1.0, 2.0), 2.0) <= 1e-12
    half = linear_path(0.5, 3.0)
    At, _ = shift_restart(half, S, phi1(half, S), 1.0)
    assert At.eval(0.0) == pytest.approx(0.0)


def test_piecewise_matches_linear_on_linear_net():
    R = [[0, 0.5], [0.25, 0]]
    net = fluid_network([1.0, 0.0], [2.0, 0.5], R, horizon=2.0, routing_horizon=10.0)
    a = solve_piecewise_linear(net)
    b = solve_linear([2.0, 0.5], R, [0, 0], [1.0, 0.0], 2.0)
    assert sup_distance(a.A, b.A, 2.0) <= 1e-12
    assert sup_distance(a.D, b.D, 2.0) <= 1e-12


def test_piecewise_burst_drains():
    N = PiecewisePath([0, 1, 3], [0, 2, 2], 0.0)
    net = NetworkPaths(VectorPath([linear_path(1.0, 3.0)]), RoutingPath([[linear_path(0.0, 10.0)]]),
                       VectorPath([N]), (0,))
    sol = solve_piecewise_linear(net)
    assert sol.Q[0].eval(1.0) == pytest.approx(1.0)
    assert sol.D[0].eval(2.0) == pytest.approx(2.0)
    assert sol.D[0].slope_at(2.5) == pytest.approx(0.0)
    assert check_phi_structure(sol.A[0], sol.D[0], net.S[0], 3.0) == []


def test_piecewise_tandem():
    R = [[0, 1.0], [0, 0]]
    net = fluid_network([1.0, 0.0], [0.5, 2.0], R, horizon=2.0, routing_horizon=10.0)
    sol = solve_piecewise_linear(net)
    assert sol.D[0].slope_at(1.0) == pytest.approx(0.5)
    assert sol.A[1].slope_at(1.0) == pytest.approx(0.5)
    assert sol.D[1].slope_at(1.0) == pytest.approx(0.5)
    assert sol.Q[0].slope_at(1.0) == pytest.approx(0.5)


def test_piecewise_rejects_unit_radius_routing():
    R = [[0, 1.0], [1.0, 0]]
    S = VectorPath([linear_path(1.0, 1.0), linear_path(1.0, 1.0)])
    N = VectorPath([linear_path(1.0, 1.0), linear_path(0.0, 1.0)])
    net = NetworkPaths(S, RoutingPath.linear(R, 5.0), N, (0,))
    with pytest.raises(ValidationError):
        solve_piecewise_linear(net)


@given(st.integers(0, 100_000))
def test_picard_from_both_ends_agree(seed):
    rng = np.random.default_rng(seed)
    net = random_pl_net(rng, K=int(rng.integers(1, 3)))
    low = picard_paths(net, 2.0, "zero")
    high = picard_paths(net, 2.0, "service")
    assert sup_distance(low.D, high.D, 2.0) <= 1e-6
    assert sup_distance(low.A, high.A, 2.0) <= 1e-6


@given(st.integers(0, 100_000))
def test_piecewise_solution_structure(seed):
    rng = np.random.default_rng(seed)
    net = random_pl_net(rng, K=int(rng.integers(1, 3)))
    sol = solve_piecewise_linear(net)
    assert residual_G(net, sol.A, sol.D, 2.0) <= 1e-8
    for i in range(net.K):
        assert check_phi_structure(sol.A[i], sol.D[i], net.S[i], 2.0) == []
