"""Piecewise-linear approximations of a continuous network and its flow.

Given a network triple with finite rate and a solution ``(A, D)`` of its
fixed point, ``build_approx`` produces a piecewise-linear triple on the grid
``k/n`` whose unique flow is exactly the polygonal interpolation of
``(A + eta t, D + eta t)``.  The routing derivative on every cell is mixed
with the nominal matrix ``R`` so its spectral radius stays below one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import phi1, residual_G, solve_piecewise_linear
from .errors import ValidationError
from .network import NetworkPaths, eta_of_delta, mix_with_R, spectral_radius
from .paths import (Path, PiecewisePath, RoutingPath, VectorPath, combine, linear_path,
                    polygonal, sup_distance)
from .ratefn import INF, kl_tilde, path_rate_net

GRID_TOL = 1e-12


@dataclass(frozen=True)
class ApproxParams:
    """Grid density ``n`` and exogenous perturbation ``delta``."""

    n: int
    delta: np.ndarray

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError("n must be a positive integer", "positive_n")
        d = np.asarray(self.delta, dtype=float)
        if np.any(d < 0):
            raise ValidationError("delta must be nonnegative", "delta")
        object.__setattr__(self, "delta", d)

    def eta(self, R) -> np.ndarray:
        return eta_of_delta(self.delta, R)

    def check_pattern(self, exogenous_set: Sequence[int]) -> None:
        on = set(np.nonzero(self.delta > 0)[0].tolist())
        if on != set(exogenous_set):
            raise ValidationError("delta must be positive exactly on the exogenous stations", "delta_pattern")

    @classmethod
    def schedule(cls, n: int, delta_bar, exogenous_set: Sequence[int], K: int) -> "ApproxParams":
        """``delta_n = delta_bar / sqrt(n)`` on the exogenous stations."""
        d = np.zeros(K)
        d[list(exogenous_set)] = np.broadcast_to(np.asarray(delta_bar, dtype=float), (K,))[list(exogenous_set)]
        return cls(int(n), d / np.sqrt(n))


def epsilon_n(eta, deltaD, n: int) -> np.ndarray:
    """Mixing weight ``eta / (n dD + eta)``; equals 1 exactly when ``dD = 0``."""
    eta = np.asarray(eta, dtype=float)
    deltaD = np.asarray(deltaD, dtype=float)
    if np.any(eta <= 0) or np.any(deltaD < 0):
        raise ValidationError("eta must be positive and increments nonnegative", "epsilon_inputs")
    return eta / (n * deltaD + eta)


def _grid(T: float, n: int) -> np.ndarray:
    m = int(np.floor(T * n + 1e-9))
    g = np.arange(m + 1) / n
    if g[-1] < T - 1e-12:
        g = np.append(g, T)
    return g


def tilted_routing(P: RoutingPath, D: VectorPath, params: ApproxParams, R, T: float) -> RoutingPath:
    """Routing path on the stretched departure scale ``D_j(t) + t eta_j``.

    On cell ``[t, t+1/n]`` row ``j`` has slope ``(1 - eps) Ptilde + eps R_j``
    where ``Ptilde`` is the increment ratio of ``P`` over the cell (0 when
    ``D_j`` is flat there).
    """
    R = np.asarray(R, dtype=float)
    K = R.shape[0]
    n = params.n
    eta = params.eta(R)
    grid = _grid(T, n)
    h = np.diff(grid)
    rows = []
    for j in range(K):
        dj = np.asarray(D[j].eval(grid), dtype=float)
        dD = np.maximum(np.diff(dj), 0.0)
        u = dj + grid * eta[j]
        eps = eta[j] * h / (dD + eta[j] * h)
        row = []
        for i in range(K):
            pv = np.asarray(P.entries[j][i].eval(dj), dtype=float)
            dP = np.diff(pv)
            with np.errstate(divide="ignore", invalid="ignore"):
                pt = np.where(dD > 0, dP / np.where(dD > 0, dD, 1.0), 0.0)
            if np.any((pt > GRID_TOL) & (R[j, i] <= 0)):
                raise ValidationError(f"routing slope ({j},{i}) lies outside the support of R", "support")
            slope = (1.0 - eps) * pt + eps * R[j, i]
            vals = np.concatenate([[0.0], np.cumsum(slope * np.diff(u))])
            row.append(PiecewisePath(u, vals, R[j, i], check=False))
        rows.append(row)
    out = RoutingPath(rows, check=False)
    for j in range(K):
        dj = np.asarray(D[j].eval(grid), dtype=float)
        dD = np.maximum(np.diff(dj), 0.0)
        for k in range(h.size):
            eps = eta[j] * h[k] / (dD[k] + eta[j] * h[k])
            if eps < 1:
                pt = np.array([(P.entries[j][i].eval(dj[k + 1]) - P.entries[j][i].eval(dj[k])) / dD[k]
                               if dD[k] > 0 else 0.0 for i in range(K)])
                if pt.sum() > 1 + 1e-9:
                    raise ValidationError("routing increments exceed departures", "row_increment")
    return out


def cell_derivatives(P: RoutingPath, j: int) -> np.ndarray:
    """Per-cell slope rows of routing row ``j`` (cells between merged knots)."""
    knots = P.row_knots(j)
    mids = 0.5 * (knots[:-1] + knots[1:])
    return np.array([[P.entries[j][i].slope_at(float(m)) for i in range(P.K)] for m in mids])


def upsilon(A: Path, D: Path, S: Path, n: int, T: float | None = None) -> PiecewisePath:
    """Service path on the grid: the service increment where the station is empty at both
    ends of a cell, the departure increment otherwise."""
    T = min(A.horizon, D.horizon, S.horizon) if T is None else T
    grid = _grid(T, n)
    a = np.asarray(A.eval(grid), dtype=float)
    d = np.asarray(D.eval(grid), dtype=float)
    s = np.asarray(S.eval(grid), dtype=float)
    if np.any(d > a + 1e-9 * max(1.0, float(np.max(np.abs(a))))):
        raise ValidationError("departures exceed arrivals", "D_le_A")
    if sup_distance(phi1(A, S), D, T) > 1e-9 * max(1.0, float(np.max(np.abs(a)))):
        raise ValidationError("departures are not the reflection of (A, S)", "phi_consistency")
    tol = GRID_TOL * max(1.0, float(np.max(np.abs(a))))
    empty = np.abs(a - d) <= tol
    both = empty[:-1] & empty[1:]
    inc = np.where(both, np.diff(s), np.diff(d))
    vals = np.concatenate([[0.0], np.cumsum(inc)])
    tail = float(S.slope_at(T))
    Sn = PiecewisePath(grid, vals, tail, check=False)
    got = phi1(polygonal(A, n) if T == A.horizon else _poly_upto(A, n, T), Sn)
    want = _poly_upto(D, n, T)
    gap = sup_distance(got, want, T)
    if gap > 1e-9 * max(1.0, float(np.max(np.abs(a)))):
        raise ValidationError(f"departures are not the reflection of (A, S): gap {gap}", "phi_consistency")
    return Sn


def _cell_cost(path: Path, rate, a: float, b: float) -> float:
    t = path.t[(path.t > a) & (path.t < b)]
    t = np.concatenate([[a], t, [b]])
    total = 0.0
    for u, v in zip(t[:-1], t[1:]):
        if v > u:
            total += (v - u) * rate(float(path.slope_at(0.5 * (u + v))))
    return total


def upsilon_cost_check(A: Path, D: Path, S: Path, n: int, rate, T: float | None = None) -> list[str]:
    """Cells where the grid service path costs more than ``S``.

    Only cells on which the station is busy throughout or empty throughout
    are checked; there the grid slope is the cell average of ``S'`` and the
    inequality is Jensen's.  A cell where the queue empties or fills part way
    uses the departure increment and carries no such guarantee.
    """
    T = min(A.horizon, D.horizon, S.horizon) if T is None else T
    Sn = upsilon(A, D, S, n, T)
    grid = _grid(T, n)
    scale = max(1.0, float(np.max(np.abs(np.asarray(A.eval(grid), dtype=float)))))
    out = []
    for k in range(grid.size - 1):
        a, b = float(grid[k]), float(grid[k + 1])
        inner = np.concatenate([[a], A.t[(A.t > a) & (A.t < b)], D.t[(D.t > a) & (D.t < b)], [b]])
        q = np.asarray(A.eval(inner), dtype=float) - np.asarray(D.eval(inner), dtype=float)
        busy = np.all(q > GRID_TOL * scale)
        empty = np.all(q <= GRID_TOL * scale)
        if not (busy or empty):
            continue
        got = _cell_cost(Sn, rate, a, b)
        want = _cell_cost(S, rate, a, b)
        if got > want + 1e-12 * max(1.0, abs(want)):
            out.append(f"cell {k}: {got} > {want}")
    return out


def _poly_upto(f: Path, n: int, T: float) -> PiecewisePath:
    grid = _grid(T, n)
    vals = np.asarray(f.eval(grid), dtype=float)
    tail = (vals[-1] - vals[-2]) / (grid[-1] - grid[-2]) if grid.size > 1 else 0.0
    return PiecewisePath(grid, vals, tail, check=False)


def _plus_linear(p: Path, rate: float) -> Path:
    return combine(p, linear_path(rate, p.horizon), 1.0)


@dataclass
class ApproxResult:
    net: NetworkPaths
    A: VectorPath
    D: VectorPath
    eta: np.ndarray
    params: ApproxParams
    grid_residual: float


def build_approx(net: NetworkPaths, A: VectorPath, D: VectorPath, params: ApproxParams, R,
                 T: float, check_fixed_point: bool = True) -> ApproxResult:
    """Piecewise-linear network whose flow is the polygonal ``(A + eta t, D + eta t)``."""
    R = np.asarray(R, dtype=float)
    K = net.K
    params.check_pattern(net.exogenous_set)
    if check_fixed_point:
        res = residual_G(net, A, D, T)
        if res > 1e-8:
            raise ValidationError(f"(A, D) does not solve the fixed point (residual {res})", "fixed_point")
    eta = params.eta(R)
    n = params.n
    Nn = VectorPath([_poly_upto(_plus_linear(net.N[i], params.delta[i]), n, T) for i in range(K)])
    Ae = [_plus_linear(A[i], eta[i]) for i in range(K)]
    De = [_plus_linear(D[i], eta[i]) for i in range(K)]
    Sn = VectorPath([upsilon(Ae[i], De[i], _plus_linear(net.S[i], eta[i]), n, T) for i in range(K)])
    Pn = tilted_routing(net.P, D, params, R, T)
    An = VectorPath([_poly_upto(a, n, T) for a in Ae])
    Dn = VectorPath([_poly_upto(d, n, T) for d in De])
    # grid identity: A + t eta = N + t delta + sum_j P_n(D_j + t eta_j)
    grid = _grid(T, n)
    worst = 0.0
    for i in range(K):
        lhs = np.asarray(Ae[i].eval(grid), dtype=float)
        rhs = np.asarray(Nn[i].eval(grid), dtype=float)
        for j in range(K):
            rhs = rhs + np.asarray(Pn.entries[j][i].eval(np.asarray(De[j].eval(grid))), dtype=float)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    scale = max(1.0, max(float(np.max(np.abs(a.v))) for a in Ae))
    if worst > 1e-12 * scale * 10:
        raise ValidationError(f"grid identity fails by {worst}", "grid_identity")
    exo = tuple(net.exogenous_set)
    out = NetworkPaths(Sn, Pn, Nn, exo)
    return ApproxResult(out, An, Dn, eta, params, worst)


def membership_issues(net: NetworkPaths, T: float) -> list[str]:
    """Reasons a triple fails to be piecewise linear with stable routing derivatives."""
    issues = []
    for name, vec in (("S", net.S), ("N", net.N)):
        for i, p in enumerate(vec):
            if p.has_jumps:
                issues.append(f"{name}{i} has jumps")
            if np.any(p.slopes < -1e-12):
                issues.append(f"{name}{i} has a negative slope")
    for i, p in enumerate(net.N):
        if i not in net.exogenous_set and np.any(p.slopes > 1e-12):
            issues.append(f"N{i} varies off the exogenous set")
    K = net.K
    knots = [net.P.row_knots(j) for j in range(K)]
    # every combination of row cells that the departures can visit together
    for j in range(K):
        for m in 0.5 * (knots[j][:-1] + knots[j][1:]):
            row = np.array([net.P.entries[j][i].slope_at(float(m)) for i in range(K)])
            if np.any(row < -1e-12) or row.sum() > 1 + 1e-9:
                issues.append(f"routing row {j} is not substochastic near u={m:.6g}")
    return issues


def _routing_gap(P1: RoutingPath, P2: RoutingPath, ranges: Sequence[float]) -> float:
    worst = 0.0
    for j in range(P1.K):
        for i in range(P1.K):
            worst = max(worst, sup_distance(P1.entries[j][i], P2.entries[j][i], ranges[j]))
    return worst


@dataclass
class SReport:
    rows: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)

    def to_json(self) -> dict:
        return {"rows": self.rows, "flags": self.flags}


def verify_S_conditions(net: NetworkPaths, A: VectorPath, D: VectorPath, schedule, model, T: float,
                        cross_check: bool = True) -> SReport:
    """Membership, distance to the network, distance of the flows, and rate gap per schedule entry."""
    R = model.R
    base_rate = path_rate_net(net, model, T, routing_range=[float(D[j].eval(T)) for j in range(net.K)])
    report = SReport()
    for params in schedule:
        res = build_approx(net, A, D, params, R, T)
        issues = membership_issues(res.net, T)
        sol = solve_piecewise_linear(res.net, T, cross_check=cross_check)
        ranges = [float(max(D[j].eval(T), sol.D[j].eval(T))) for j in range(net.K)]
        s2 = max(sup_distance(res.net.S, net.S, T), sup_distance(res.net.N, net.N, T),
                 _routing_gap(res.net.P, net.P, ranges))
        s3 = max(sup_distance(sol.A, A, T), sup_distance(sol.D, D, T))
        rate_n = path_rate_net(res.net, model, T, routing_range=[float(sol.D[j].eval(T)) for j in range(net.K)])
        s4 = abs(rate_n - base_rate) if rate_n < INF and base_rate < INF else INF
        flow_gap = max(sup_distance(sol.A, res.A, T), sup_distance(sol.D, res.D, T))
        cost_issues = []
        for i in range(net.K):
            Ae, De, Se = (_plus_linear(x, res.eta[i]) for x in (A[i], D[i], net.S[i]))
            cost_issues += [f"station {i} {m}" for m in
                            upsilon_cost_check(Ae, De, Se, params.n, model.service[i], T)]
        report.rows.append({
            "n": params.n,
            "delta": params.delta.tolist(),
            "eta": res.eta.tolist(),
            "S1": not issues,
            "S1_issues": issues,
            "S2": s2,
            "S3": s3,
            "S4": s4,
            "rate": rate_n,
            "flow_vs_polygonal": flow_gap,
            "grid_residual": res.grid_residual,
            "service_cost_issues": cost_issues,
        })
    for key in ("S2", "S3", "S4"):
        col = report.column(key)
        if np.any(np.diff(col) > 0):
            report.flags.append(f"{key} is not decreasing: {col.tolist()}")
    if any(r["service_cost_issues"] for r in report.rows):
        report.flags.append("grid service path costs more than the original on a pure cell")
    if not all(r["S1"] for r in report.rows):
        report.flags.append("some approximation failed membership")
    return report


def routing_cost_check(P: RoutingPath, Pn: RoutingPath, D: VectorPath, R, T: float, n: int) -> list[str]:
    """Cells where the tilted routing row costs more than the original one."""
    R = np.asarray(R, dtype=float)
    out = []
    grid = _grid(T, n)
    for j in range(P.K):
        dj = np.asarray(D[j].eval(grid), dtype=float)
        for k in range(grid.size - 1):
            if dj[k + 1] <= dj[k]:
                continue
            mid = 0.5 * (dj[k] + dj[k + 1])
            orig = [P.entries[j][i].slope_at(float(mid)) for i in range(P.K)]
            if any(P.entries[j][i].next_knot(dj[k]) < dj[k + 1] for i in range(P.K)):
                continue
            un = Pn.row_knots(j)
            cell = 0.5 * (un[k] + un[k + 1]) if k + 1 < un.size else un[-1]
            new = [Pn.entries[j][i].slope_at(float(cell)) for i in range(P.K)]
            if kl_tilde(np.maximum(new, 0), R[j]) > kl_tilde(np.maximum(orig, 0), R[j]) + 1e-12:
                out.append(f"row {j} cell {k}")
    return out


def spectral_check(Pn: RoutingPath) -> float:
    """Largest spectral radius of the routing derivative over all row-cell combinations visited."""
    worst = 0.0
    K = Pn.K
    cells = [cell_derivatives(Pn, j) for j in range(K)]
    if K <= 2:
        import itertools
        for combo in itertools.product(*[range(c.shape[0]) for c in cells]):
            M = np.array([cells[j][combo[j]] for j in range(K)])
            worst = max(worst, spectral_radius(np.maximum(M, 0.0)))
    else:
        for j in range(K):
            worst = max(worst, float(np.max(cells[j].sum(axis=1))))
    return worst


def mix_check(P_slopes: np.ndarray, R, eps) -> np.ndarray:
    """Thin wrapper used by the tests: mixed derivative matrix for one cell."""
    return mix_with_R(P_slopes, R, eps)
