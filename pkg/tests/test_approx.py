from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pl_net
from ldq.approx import (ApproxParams, build_approx, cell_derivatives, epsilon_n, membership_issues,
                        routing_cost_check, spectral_check, tilted_routing, upsilon, upsilon_cost_check,
                        verify_S_conditions)
from ldq.dynamics import phi1, solve_piecewise_linear
from ldq.errors import ValidationError
from ldq.network import NetworkPaths, RateModel, fluid_network, spectral_radius
from ldq.paths import PiecewisePath, RoutingPath, VectorPath, combine, linear_path, polygonal, sup_distance
from ldq.ratefn import PoissonRate, RenewalRate

DATA = resources.files("ldq") / "data"


def load(name):
    return json.loads((DATA / name).read_text())


def burst():
    net = NetworkPaths.from_json(load("burst_network.json"))
    model = RateModel.from_json(load("burst_model.json"))
    return net, model


def plus_eta(p, rate):
    return combine(p, linear_path(rate, p.horizon), 1.0)


# -- mixing weight ---------------------------------------------------------------

def test_epsilon_examples():
    assert epsilon_n([1.0], [0.0], 7).tolist() == [1.0]
    assert epsilon_n([2.0], [0.2], 10) == pytest.approx([0.5])
    assert epsilon_n([1.0], [0.9], 10) == pytest.approx([0.1])


@given(st.floats(1e-3, 10), st.floats(0, 10), st.integers(1, 1000))
def test_epsilon_in_unit_interval_and_one_iff_flat(eta, dD, n):
    e = float(epsilon_n([eta], [dD], n)[0])
    assert 0 < e <= 1
    assert (e == 1.0) == (n * dD + eta == eta)


def test_epsilon_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        epsilon_n([0.0], [1.0], 3)
    with pytest.raises(ValidationError):
        epsilon_n([1.0], [-1.0], 3)


def test_params_pattern_and_schedule():
    p = ApproxParams.schedule(16, 0.5, (0,), 2)
    assert p.delta.tolist() == [0.125, 0.0]
    p.check_pattern((0,))
    with pytest.raises(ValidationError):
        p.check_pattern((0, 1))
    with pytest.raises(ValidationError):
        ApproxParams(0, [1.0])


# -- tilted routing --------------------------------------------------------------

def test_tilted_routing_of_fluid_routing_is_R():
    R = np.array([[0, 0.5], [0.25, 0]])
    D = VectorPath([linear_path(1.3, 2.0), linear_path(0.4, 2.0)])
    params = ApproxParams(8, [0.3, 0.0])
    Pn = tilted_routing(RoutingPath.linear(R, 10.0), D, params, R, 2.0)
    for j in range(2):
        cells = cell_derivatives(Pn, j)
        assert np.allclose(cells, R[j], atol=1e-12)


def test_tilted_routing_flat_cell_uses_R():
    R = np.array([[0.5]])
    D = VectorPath([PiecewisePath([0, 0.5, 1.0], [0, 0, 0.5], 1.0)])
    P = RoutingPath([[linear_path(0.2, 5.0)]])
    params = ApproxParams(4, [1.0])
    eta = params.eta(R)[0]
    Pn = tilted_routing(P, D, params, R, 1.0)
    slopes = cell_derivatives(Pn, 0)[:, 0]
    assert slopes[:2] == pytest.approx([0.5, 0.5], abs=1e-14)
    # busy cells: the departure increment is 1/4 per cell of length 1/4
    eps = eta * 0.25 / (0.25 + eta * 0.25)
    assert slopes[2:] == pytest.approx([(1 - eps) * 0.2 + eps * 0.5] * 2, abs=1e-14)


def test_tilted_routing_rejects_slope_outside_support():
    R = np.array([[0.0, 0.5], [0.25, 0]])
    P = RoutingPath.linear([[0.3, 0.5], [0.25, 0]], 10.0)
    D = VectorPath([linear_path(1.0, 1.0), linear_path(1.0, 1.0)])
    with pytest.raises(ValidationError):
        tilted_routing(P, D, ApproxParams(4, [0.1, 0.0]), R, 1.0)


def test_grid_identity_three_cell_feedback():
    R = np.array([[0.4]])
    N = VectorPath([PiecewisePath([0, 1, 2, 3], [0, 2.0, 2.2, 3.0], 0.8)])
    S = VectorPath([PiecewisePath([0, 1, 2, 3], [0, 1.0, 3.0, 3.5], 0.5)])
    P = RoutingPath([[PiecewisePath([0, 1.5, 10], [0, 0.45, 4.7], 0.5)]])
    net = NetworkPaths(S, P, N, (0,))
    sol = solve_piecewise_linear(net, 3.0)
    params = ApproxParams(1, [0.2])
    res = build_approx(net, sol.A, sol.D, params, R, 3.0)
    eta = res.eta[0]
    grid = np.arange(4.0)
    lhs = np.asarray(sol.A[0].eval(grid)) + grid * eta
    u = np.asarray(sol.D[0].eval(grid)) + grid * eta
    rhs = np.asarray(N[0].eval(grid)) + grid * 0.2 + np.asarray(res.net.P.entries[0][0].eval(u))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


# -- grid service path ---------------------------------------------------------

def test_upsilon_busy_uses_departure_increments():
    A = PiecewisePath([0, 2], [1.0, 5.0], 2.0)
    S = PiecewisePath([0, 1, 2], [0, 0.5, 2.5], 2.0)
    D = phi1(A, S)
    Sn = upsilon(A, D, S, 4, 2.0)
    g = np.arange(9) / 4
    assert np.allclose(np.diff(Sn.eval(g)), np.diff(D.eval(g)), atol=1e-14)


def test_upsilon_always_empty_is_polygonal_service():
    A = PiecewisePath([0, 2], [0.0, 1.0], 0.5)
    S = PiecewisePath([0, 1, 2], [0, 1.7, 2.6], 1.0)
    D = phi1(A, S)
    assert sup_distance(A, D, 2.0) == 0.0
    Sn = upsilon(A, D, S, 5, 2.0)
    assert sup_distance(Sn, polygonal(S, 5), 2.0) <= 1e-14


def test_upsilon_reflection_identity_burst_then_drain():
    A = PiecewisePath([0, 1, 2], [0, 2.0, 2.0], 0.0)
    S = linear_path(1.0, 2.0)
    D = phi1(A, S)
    Sn = upsilon(A, D, S, 10, 2.0)
    assert sup_distance(phi1(polygonal(A, 10), Sn), polygonal(D, 10), 2.0) <= 1e-14


def test_upsilon_rejects_inconsistent_departures():
    A = linear_path(1.0, 1.0)
    S = linear_path(2.0, 1.0)
    with pytest.raises(ValidationError):
        upsilon(A, linear_path(0.5, 1.0), S, 4, 1.0)


def test_upsilon_cost_on_pure_cells():
    A = PiecewisePath([0, 1, 2], [0, 2.0, 2.0], 0.0)
    S = PiecewisePath([0, 0.5, 2], [0, 0.3, 3.0], 1.8)
    D = phi1(A, S)
    for n in (1, 3, 10, 40):
        assert upsilon_cost_check(A, D, S, n, PoissonRate(1.0), 2.0) == []


def test_upsilon_cost_can_rise_on_a_mixed_cell():
    # queue 0.5 at time 0, no arrivals, service at the mean rate: the single
    # cell starts busy and ends empty, so its grid slope is the mean departure
    # rate 0.5 and costs more than the original service
    A = PiecewisePath([0, 1], [0.5, 0.5], 0.0)
    S = linear_path(1.0, 1.0)
    D = phi1(A, S)
    Sn = upsilon(A, D, S, 1, 1.0)
    f = PoissonRate(1.0)
    assert f(Sn.slope_at(0.5)) > f(1.0)
    assert upsilon_cost_check(A, D, S, 1, f, 1.0) == []


# -- full construction ---------------------------------------------------------

def test_build_approx_burst_flow_is_polygonal():
    net, model = burst()
    T = 4.0
    sol = solve_piecewise_linear(net, T)
    for n in (10, 40):
        params = ApproxParams.schedule(n, 0.5, net.exogenous_set, net.K)
        res = build_approx(net, sol.A, sol.D, params, model.R, T)
        flow = solve_piecewise_linear(res.net, T)
        target_A = polygonal(VectorPath([plus_eta(sol.A[i], res.eta[i]) for i in range(2)]), n)
        target_D = polygonal(VectorPath([plus_eta(sol.D[i], res.eta[i]) for i in range(2)]), n)
        assert sup_distance(flow.A, target_A, T) <= 1e-9
        assert sup_distance(flow.D, target_D, T) <= 1e-9
        assert res.grid_residual <= 1e-12 * 10
        assert membership_issues(res.net, T) == []
        assert spectral_check(res.net.P) < 1
        assert res.net.exogenous_set == net.exogenous_set


@settings(max_examples=15)
@given(st.integers(0, 100_000), st.sampled_from([3, 7, 16]))
def test_build_approx_random_nets(seed, n):
    rng = np.random.default_rng(seed)
    net = random_pl_net(rng)
    K, T = net.K, 2.0
    R = np.full((K, K), 0.85 / K)
    sol = solve_piecewise_linear(net, T)
    params = ApproxParams.schedule(n, 0.5, net.exogenous_set, K)
    res = build_approx(net, sol.A, sol.D, params, R, T)
    flow = solve_piecewise_linear(res.net, T)
    assert sup_distance(flow.A, res.A, T) <= 1e-9
    assert sup_distance(flow.D, res.D, T) <= 1e-9
    assert membership_issues(res.net, T) == []
    for j in range(K):
        cells = cell_derivatives(res.net.P, j)
        assert np.all(cells >= 0) and np.all(cells.sum(axis=1) < 1)
    assert routing_cost_check(net.P, res.net.P, sol.D, R, T, n) == []
    for i in range(K):
        for f in (PoissonRate(1.3), RenewalRate.erlang(2, 1.0)):
            assert upsilon_cost_check(sol.A[i], sol.D[i], net.S[i], n, f, T) == []


def test_build_approx_every_cell_combination_is_stable():
    net, model = burst()
    sol = solve_piecewise_linear(net, 4.0)
    res = build_approx(net, sol.A, sol.D, ApproxParams.schedule(10, 0.5, (0,), 2), model.R, 4.0)
    c0, c1 = cell_derivatives(res.net.P, 0), cell_derivatives(res.net.P, 1)
    worst = max(spectral_radius(np.array([r0, r1])) for r0 in c0 for r1 in c1)
    assert worst < 1
    assert worst == pytest.approx(spectral_check(res.net.P), abs=1e-12)


def test_build_approx_rejects_non_solution():
    net, model = burst()
    sol = solve_piecewise_linear(net, 4.0)
    wrong = VectorPath([plus_eta(sol.D[0], 0.1), sol.D[1]])
    with pytest.raises(ValidationError):
        build_approx(net, sol.A, wrong, ApproxParams.schedule(10, 0.5, (0,), 2), model.R, 4.0)


def test_build_approx_rejects_bad_delta_pattern():
    net, model = burst()
    sol = solve_piecewise_linear(net, 4.0)
    with pytest.raises(ValidationError):
        build_approx(net, sol.A, sol.D, ApproxParams(10, [0.1, 0.1]), model.R, 4.0)


# -- convergence report --------------------------------------------------------

def test_verify_fluid_instance_gaps_decrease():
    cfg = load("approx_twostation.json")
    w = cfg["network"]
    net = fluid_network(w["lam"], w["mu"], w["routing"], w["horizon"], w["routing_horizon"])
    model = RateModel.from_json(load("twostation_model.json"))
    sol = solve_piecewise_linear(net, 1.0)
    sched = [ApproxParams.schedule(n, 0.5, net.exogenous_set, 2) for n in (10, 20, 40, 80)]
    rep = verify_S_conditions(net, sol.A, sol.D, sched, model, 1.0)
    assert rep.flags == []
    for key in ("S2", "S3", "S4"):
        assert np.all(np.diff(rep.column(key)) < 0)
    # the fluid point has zero rate, so the rate gap is the rate of the approximation
    assert rep.rows[-1]["S4"] == pytest.approx(rep.rows[-1]["rate"], abs=1e-15)
    assert all(r["flow_vs_polygonal"] <= 1e-9 for r in rep.rows)


def test_verify_report_json_is_serializable():
    net, model = burst()
    sol = solve_piecewise_linear(net, 4.0)
    rep = verify_S_conditions(net, sol.A, sol.D, [ApproxParams.schedule(10, 0.5, (0,), 2)], model, 4.0)
    text = json.dumps(rep.to_json())
    assert math.isfinite(json.loads(text)["rows"][0]["S3"])
