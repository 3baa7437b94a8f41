"""Reflection, routing composition and the network fixed point.

The departure map is ``D = S + min(0, inf_{s<=t} (A - S)(s))`` per station and
the arrival map is ``A_i = N_i + sum_j P[j][i](D_j)``.  A pair ``(A, D)``
solving both at once is the network flow.  Counting networks are solved
exactly by an event loop in integer arithmetic; linear networks in closed
form; piecewise-linear networks by gluing linear segments, cross-checked by
monotone Picard iteration on paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError, ValidationError
from .network import NetworkPaths, spectral_radius
from .paths import (Path, PiecewisePath, StepPath, VectorPath, add_many, as_vector, combine,
                    compose, linear_path, merge_knots, minimum, running_min, shift, simplify,
                    sup_distance, write_csv)

SNAP_TOL = 1e-12


@dataclass(frozen=True)
class FlowSolution:
    """Arrivals ``A`` and departures ``D`` per station; ``Q = A - D``."""

    A: VectorPath
    D: VectorPath
    horizon: float

    @property
    def K(self) -> int:
        return len(self.A)

    @property
    def Q(self) -> VectorPath:
        return VectorPath([a - d for a, d in zip(self.A, self.D)])

    def knots(self) -> np.ndarray:
        t = merge_knots(list(self.A) + list(self.D), upto=self.horizon)
        return t[t <= self.horizon]

    def table(self, grid: np.ndarray) -> dict:
        grid = np.asarray(grid, dtype=float)
        cols = {"t": grid}
        for name, vec in (("A", self.A), ("D", self.D), ("Q", self.Q)):
            for i, c in enumerate(vec):
                cols[f"{name}{i + 1}"] = np.asarray(c.eval(grid), dtype=float)
        return cols

    def to_csv(self, grid, fh) -> None:
        write_csv(self.table(grid), fh)


# ---------------------------------------------------------------------------
# counting helpers

def _is_counting(p: Path) -> bool:
    return isinstance(p, StepPath) and p.n is not None


def _common_n(paths: Sequence[Path]) -> int | None:
    ns = {p.n for p in paths if _is_counting(p)}
    if len(ns) == 1 and all(_is_counting(p) for p in paths):
        return ns.pop()
    return None


def counts_at(p: StepPath, grid: np.ndarray) -> np.ndarray:
    """Integer counts of a counting path at the given times."""
    k = np.searchsorted(p.t, grid, side="right") - 1
    return p.counts[k]


def step_from_counts(grid: np.ndarray, counts: np.ndarray, n: int, horizon: float) -> StepPath:
    counts = np.asarray(counts, dtype=np.int64)
    inc = np.diff(counts)
    if np.any(inc < 0):
        raise ValidationError("counting paths must be nondecreasing", "nondecreasing")
    pos = inc > 0
    return StepPath(grid[1:][pos], inc[pos], counts[0] / n, horizon, n=n)


def _union_grid(paths: Sequence[Path], T: float) -> np.ndarray:
    g = np.unique(np.concatenate([p.t for p in paths] + [[0.0, T]]))
    return g[g <= T]


# ---------------------------------------------------------------------------
# the maps

def reflect1d(X: Path) -> Path:
    """``R(X)(t) = X(t) - min(0, inf_{s <= t} X(s))``."""
    m = running_min(X)
    zero = linear_path(0.0, X.horizon)
    return combine(X, minimum(m, zero), -1.0)


def _phi_counting(a: StepPath, s: StepPath, n: int, T: float) -> StepPath:
    grid = _union_grid([a, s], T)
    ca, cs = counts_at(a, grid), counts_at(s, grid)
    d = cs + np.minimum(0, np.minimum.accumulate(ca - cs))
    # second route: A - reflection(A - S)
    x = ca - cs
    d2 = ca - (x - np.minimum(0, np.minimum.accumulate(x)))
    if not np.array_equal(d, d2):
        raise NumericError("departure formulas disagree on a counting path")
    return step_from_counts(grid, d, n, T)


def phi1(a: Path, s: Path) -> Path:
    """One-station departure map."""
    if abs(s.eval(0.0)) > SNAP_TOL:
        raise ValidationError("service path must start at 0", "service_starts_at_zero")
    n = _common_n([a, s])
    T = min(a.horizon, s.horizon)
    if n is not None:
        return _phi_counting(a, s, n, T)
    x = combine(a, s, -1.0)
    zero = linear_path(0.0, x.horizon)
    d = combine(s, minimum(running_min(x), zero), 1.0)
    d2 = combine(a, reflect1d(x), -1.0)
    gap = sup_distance(d, d2, T)
    scale = max(1.0, float(np.max(np.abs(a.v))), float(np.max(np.abs(s.v))))
    if gap > 1e-10 * scale:
        raise NumericError(f"departure formulas disagree by {gap}", gap=gap)
    return d


def phi(A, S) -> VectorPath:
    """Departures ``D_i = S_i + min(0, inf_{s<=t} (A_i - S_i)(s))`` per station."""
    A, S = as_vector(A), as_vector(S)
    if len(A) != len(S):
        raise ValidationError("A and S must have equal dimension", "dimension")
    return VectorPath([phi1(a, s) for a, s in zip(A, S)])


def gamma(D, P, N) -> VectorPath:
    """Arrivals ``A_i = N_i + sum_j P[j][i](D_j)``."""
    D, N = as_vector(D), as_vector(N)
    K = len(D)
    if len(N) != K or P.K != K:
        raise ValidationError("D, P and N must share the dimension K", "dimension")
    for j in range(K):
        reach = float(np.max(D[j].v))
        if reach > P.row_horizon(j) + 1e-9 and np.any([np.any(e.v != 0) or e.tail_slope for e in P.row(j)]):
            raise ValidationError(f"routing row {j} is defined up to {P.row_horizon(j)} "
                                  f"but departures reach {reach}", "routing_horizon")
    n = _common_n(list(D) + list(N))
    if n is not None and P.decisions is not None and P.n == n:
        return _gamma_counting(D, P, N, n)
    out = []
    for i in range(K):
        terms = [N[i]] + [compose(P.entries[j][i], D[j]) for j in range(K)
                          if np.any(P.entries[j][i].v != 0) or P.entries[j][i].tail_slope != 0]
        out.append(add_many(terms) if len(terms) > 1 else terms[0])
    return VectorPath(out)


def _decision_tables(decisions, K: int) -> list[np.ndarray]:
    tables = []
    for dec in decisions:
        onehot = np.zeros((len(dec) + 1, K + 1), dtype=np.int64)
        onehot[np.arange(1, len(dec) + 1), np.asarray(dec, dtype=np.int64)] = 1
        tables.append(np.cumsum(onehot, axis=0)[:, :K])
    return tables


def _gamma_counting(D: VectorPath, P, N: VectorPath, n: int) -> VectorPath:
    K = len(D)
    T = min(min(d.horizon for d in D), min(x.horizon for x in N))
    grid = _union_grid(list(D) + list(N), T)
    tables = _decision_tables(P.decisions, K)
    dc = [counts_at(d, grid) for d in D]
    out = []
    for i in range(K):
        c = counts_at(N[i], grid).copy()
        for j in range(K):
            if dc[j].size and dc[j][-1] >= tables[j].shape[0]:
                raise ValidationError(f"routing decisions of station {j} exhausted", "decisions_exhausted")
            c += tables[j][dc[j], i]
        out.append(step_from_counts(grid, c, n, T))
    return VectorPath(out)


def residual_G(net: NetworkPaths, A, D, T: float) -> float:
    """Sup over ``[0, T]`` of ``|A - Gamma(D)|`` and ``|D - Phi(A, S)|``."""
    A, D = as_vector(A), as_vector(D)
    n = _common_n(list(A) + list(D) + list(net.S) + list(net.N))
    if n is not None and net.P.decisions is not None and net.P.n == n:
        grid = _union_grid(list(A) + list(D) + list(net.S) + list(net.N), T)
        tables = _decision_tables(net.P.decisions, net.K)
        ac = [counts_at(a, grid) for a in A]
        dc = [counts_at(d, grid) for d in D]
        worst = 0
        for i in range(net.K):
            g = counts_at(net.N[i], grid).copy()
            for j in range(net.K):
                if dc[j][-1] >= tables[j].shape[0]:
                    return np.inf
                g += tables[j][dc[j], i]
            sc = counts_at(net.S[i], grid)
            f = sc + np.minimum(0, np.minimum.accumulate(ac[i] - sc))
            worst = max(worst, int(np.max(np.abs(ac[i] - g))), int(np.max(np.abs(dc[i] - f))))
        return worst / n
    GA = gamma(D, net.P, net.N)
    FD = phi(A, net.S)
    return max(sup_distance(A, GA, T), sup_distance(D, FD, T))


# ---------------------------------------------------------------------------
# counting networks

def solve_counting(net: NetworkPaths, decisions=None, T: float | None = None) -> FlowSolution:
    """Exact event-driven solution of a scaled counting network.

    At a given instant exogenous arrivals are added first; then every
    station holding an unused service tick at that instant and a nonempty
    queue serves, routing by its next decision (``K`` means exit), until no
    station can serve.  This yields the right-continuous fixed point.
    """
    K = net.K
    decisions = net.P.decisions if decisions is None else tuple(np.asarray(d, dtype=np.int64) for d in decisions)
    if decisions is None or len(decisions) != K:
        raise ValidationError("counting solver needs one decision sequence per station", "decisions")
    n = _common_n(list(net.S) + list(net.N))
    if n is None:
        raise ValidationError("counting solver needs scaled counting paths with a common n", "counting")
    if net.P.decisions is not None and decisions is not net.P.decisions:
        for a, b in zip(decisions, net.P.decisions):
            m = min(len(a), len(b))
            if not np.array_equal(a[:m], b[:m]):
                raise ValidationError("decision sequences disagree with the routing path", "routing_consistency")
    T = min(min(s.horizon for s in net.S), min(x.horizon for x in net.N)) if T is None else float(T)
    # events: (time, kind, station, multiplicity); kind 0 = arrival, 1 = tick
    ev_t, ev_kind, ev_st, ev_m = [], [], [], []
    for i in range(K):
        for kind, p in ((0, net.N[i]), (1, net.S[i])):
            jt = p.t[1:]
            inc = np.diff(p.counts)
            sel = (inc > 0) & (jt <= T)
            ev_t.append(jt[sel])
            ev_kind.append(np.full(sel.sum(), kind))
            ev_st.append(np.full(sel.sum(), i))
            ev_m.append(inc[sel])
    t_all = np.concatenate(ev_t)
    kind_all = np.concatenate(ev_kind)
    st_all = np.concatenate(ev_st)
    m_all = np.concatenate(ev_m)
    order = np.lexsort((st_all, kind_all, t_all))
    t_all, kind_all, st_all, m_all = t_all[order], kind_all[order], st_all[order], m_all[order]
    q = np.array([int(net.N[i].counts[0]) for i in range(K)], dtype=np.int64)
    a_cnt = q.copy()
    d_cnt = np.zeros(K, dtype=np.int64)
    ptr = np.zeros(K, dtype=np.int64)
    dec_len = [len(d) for d in decisions]
    times = [0.0]
    a_hist = [a_cnt.copy()]
    d_hist = [d_cnt.copy()]
    idx = 0
    total = t_all.size
    while idx < total:
        t = t_all[idx]
        ticks = np.zeros(K, dtype=np.int64)
        while idx < total and t_all[idx] == t:
            i, m = st_all[idx], m_all[idx]
            if kind_all[idx] == 0:
                q[i] += m
                a_cnt[i] += m
            else:
                ticks[i] += m
            idx += 1
        busy = True
        while busy:
            busy = False
            for i in range(K):
                while ticks[i] > 0 and q[i] > 0:
                    if ptr[i] >= dec_len[i]:
                        raise ValidationError(f"routing decisions of station {i} exhausted before "
                                              f"the horizon", "decisions_exhausted")
                    j = int(decisions[i][ptr[i]])
                    ptr[i] += 1
                    ticks[i] -= 1
                    q[i] -= 1
                    d_cnt[i] += 1
                    busy = True
                    if j < K:
                        q[j] += 1
                        a_cnt[j] += 1
        times.append(float(t))
        a_hist.append(a_cnt.copy())
        d_hist.append(d_cnt.copy())
    grid = np.array(times)
    a_hist = np.array(a_hist)
    d_hist = np.array(d_hist)
    if grid.size > 1 and grid[1] == 0.0:
        grid, a_hist, d_hist = grid[1:], a_hist[1:], d_hist[1:]
    A = VectorPath([_counts_path(grid, a_hist[:, i], n, T) for i in range(K)])
    D = VectorPath([_counts_path(grid, d_hist[:, i], n, T) for i in range(K)])
    return FlowSolution(A, D, T)


def _counts_path(grid: np.ndarray, counts: np.ndarray, n: int, T: float) -> StepPath:
    inc = np.diff(counts)
    pos = inc > 0
    return StepPath(grid[1:][pos], inc[pos], counts[0] / n, T, n=n)


def picard_counting(net: NetworkPaths, T: float | None = None, max_iter: int = 100_000) -> FlowSolution:
    """Integer Picard iteration ``A = Gamma(D)``, ``D = Phi(A)`` from ``D = 0``."""
    K = net.K
    n = _common_n(list(net.S) + list(net.N))
    if n is None or net.P.decisions is None:
        raise ValidationError("integer Picard needs a counting network", "counting")
    T = min(min(s.horizon for s in net.S), min(x.horizon for x in net.N)) if T is None else float(T)
    grid = _union_grid(list(net.S) + list(net.N), T)
    tables = _decision_tables(net.P.decisions, K)
    nc = [counts_at(x, grid) for x in net.N]
    sc = [counts_at(s, grid) for s in net.S]
    d = [np.zeros(grid.size, dtype=np.int64) for _ in range(K)]
    for _ in range(max_iter):
        a = []
        for i in range(K):
            c = nc[i].copy()
            for j in range(K):
                if d[j][-1] >= tables[j].shape[0]:
                    raise ValidationError(f"routing decisions of station {j} exhausted", "decisions_exhausted")
                c += tables[j][d[j], i]
            a.append(c)
        new_d = [sc[i] + np.minimum(0, np.minimum.accumulate(a[i] - sc[i])) for i in range(K)]
        if any(np.any(nd < od) for nd, od in zip(new_d, d)):
            raise NumericError("Picard iterates lost monotonicity")
        if all(np.array_equal(nd, od) for nd, od in zip(new_d, d)):
            break
        d = new_d
    else:
        raise NumericError("integer Picard did not converge")
    A = VectorPath([step_from_counts(grid, a[i], n, T) for i in range(K)])
    D = VectorPath([step_from_counts(grid, d[i], n, T) for i in range(K)])
    return FlowSolution(A, D, T)


# ---------------------------------------------------------------------------
# linear networks

def _check_radius(P: np.ndarray, what: str = "routing matrix") -> None:
    rho = spectral_radius(P)
    if not rho < 1:
        raise ValidationError(f"{what} has spectral radius {rho} >= 1", "spectral_radius")


def static_fixed_point(y, P, alpha, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """The unique ``x`` with ``x = alpha + P^T min(x, y)``, by Picard from 0 then exact polish."""
    y = np.asarray(y, dtype=float)
    P = np.asarray(P, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    x = np.zeros_like(alpha)
    for _ in range(max_iter):
        nx = alpha + P.T @ np.minimum(x, y)
        if np.max(np.abs(nx - x)) <= tol * max(1.0, float(np.max(np.abs(nx)))):
            x = nx
            break
        x = nx
    else:
        raise NumericError("static fixed point did not converge")
    # solve the linear system of the detected regime exactly
    sat = x > y
    U = ~sat
    K = x.size
    xs = x.copy()
    if np.any(U):
        M = np.eye(int(U.sum())) - P[np.ix_(U, U)].T
        rhs = alpha[U] + P[np.ix_(sat, U)].T @ y[sat]
        xs[U] = np.linalg.solve(M, rhs)
    xs[sat] = alpha[sat] + P[np.ix_(U, sat)].T @ xs[U] + P[np.ix_(sat, sat)].T @ y[sat]
    if np.all(xs[sat] >= y[sat] - 1e-12) and np.all(xs[U] <= y[U] + 1e-12) and K:
        resid = np.max(np.abs(xs - (alpha + P.T @ np.minimum(xs, y))))
        if resid <= 1e-12 * max(1.0, float(np.max(np.abs(xs)))):
            return xs
    return x


def _rate_fixed_point(lam, P, mu, status) -> np.ndarray:
    """Departure rates ``d`` with ``a = lam + P^T d`` and per-station rules.

    ``status``: 1 busy (``d = mu``), -1 idle below capacity (``d = a``),
    0 tied (``d = min(a, mu)``).
    """
    d = np.zeros_like(mu)
    for _ in range(100_000):
        a = lam + P.T @ d
        nd = np.where(status == 1, mu, np.where(status == -1, a, np.minimum(a, mu)))
        if np.max(np.abs(nd - d)) <= 1e-15 * max(1.0, float(np.max(np.abs(nd)))):
            d = nd
            break
        d = nd
    # exact polish on the detected regime
    a = lam + P.T @ d
    busy = (status == 1) | ((status == 0) & (a > mu))
    free = ~busy
    if np.any(free):
        M = np.eye(int(free.sum())) - P[np.ix_(free, free)].T
        rhs = lam[free] + P[np.ix_(busy, free)].T @ mu[busy]
        af = np.linalg.solve(M, rhs)
        cand = d.copy()
        cand[busy] = mu[busy]
        cand[free] = af
        a2 = lam + P.T @ cand
        ok = np.all(a2[free] <= mu[free] + 1e-12) or np.all(status[free] == -1)
        if ok and np.max(np.abs(cand - np.where(busy, mu, a2))) <= 1e-12 * max(1.0, float(np.max(np.abs(cand)))):
            return cand
    return d


def solve_linear(mu, P, N0, lam, T: float, check: bool = True) -> FlowSolution:
    """Fluid solution of a linear network: ``A(t) = x(mu t, P, N0 + lam t)``, ``D = min(A, mu t)``.

    The solution is affine between regime changes; each regime's affine
    piece is solved exactly and the next change located in closed form.
    """
    mu = np.asarray(mu, dtype=float)
    P = np.asarray(P, dtype=float)
    N0 = np.asarray(N0, dtype=float)
    lam = np.asarray(lam, dtype=float)
    K = mu.size
    if P.shape != (K, K) or N0.shape != (K,) or lam.shape != (K,):
        raise ValidationError("inconsistent dimensions in linear network", "dimension")
    if np.any(mu < 0) or np.any(lam < 0) or np.any(N0 < 0):
        raise ValidationError("rates and initial values must be nonnegative", "nonnegative")
    _check_radius(P)
    T = float(T)
    times = [0.0]
    xs = [static_fixed_point(np.zeros(K), P, N0)]
    t0 = 0.0
    while t0 < T:
        x0 = xs[-1]
        y0 = mu * t0
        tol = 1e-12 * max(1.0, float(np.max(np.abs(x0))))
        status = np.where(x0 > y0 + tol, 1, np.where(x0 < y0 - tol, -1, 0))
        d = _rate_fixed_point(lam, P, mu, status)
        a_rate = lam + P.T @ d
        # next regime change: some x_i(t) meets mu_i t
        gap = x0 - y0
        rel = a_rate - mu
        cand = np.full(K, np.inf)
        busy = np.where(status == 1, True, np.where(status == -1, False, a_rate > mu + 1e-15))
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = -gap / rel
        moving_down = busy & (rel < 0) & (gap > tol)
        moving_up = ~busy & (rel > 0) & (gap < -tol)
        cand[moving_down | moving_up] = hit[moving_down | moving_up]
        dt = float(np.min(cand))
        t1 = min(T, t0 + dt) if np.isfinite(dt) else T
        if t1 <= t0:
            t1 = min(T, t0 + 1e-12)
        x1 = x0 + a_rate * (t1 - t0)
        # snap the crossing station onto its capacity line
        if t1 < T:
            k = int(np.argmin(cand))
            x1[k] = mu[k] * t1
        times.append(t1)
        xs.append(x1)
        t0 = t1
    times = np.array(times)
    X = np.array(xs)
    A = VectorPath([PiecewisePath(times, X[:, i], None if times.size > 1 else 0.0) for i in range(K)])
    A = VectorPath([simplify(a) for a in A])
    D = VectorPath([minimum(A[i], linear_path(mu[i], T)) for i in range(K)])
    D = VectorPath([simplify(_as_piecewise(d)) for d in D])
    if check:
        mids = 0.5 * (times[:-1] + times[1:]) if times.size > 1 else times
        for tm in np.concatenate([mids, [T]]):
            ref = static_fixed_point(mu * tm, P, N0 + lam * tm)
            got = A.eval(tm)
            if np.max(np.abs(ref - got)) > 1e-9 * max(1.0, float(np.max(np.abs(ref)))):
                raise NumericError(f"linear solution disagrees with Picard at t={tm}",
                                   gap=float(np.max(np.abs(ref - got))))
    return FlowSolution(A, D, T)


def _as_piecewise(p: Path) -> PiecewisePath:
    if isinstance(p, PiecewisePath):
        return p
    if p.has_jumps:
        raise NumericError("expected a continuous path")
    return PiecewisePath(p.t, np.maximum.accumulate(p.v), max(p.tail_slope, 0.0), check=False)


# ---------------------------------------------------------------------------
# piecewise-linear networks

def shift_restart(A: Path, S: Path, D: Path, u: float) -> tuple[Path, Path]:
    """Restart a station at time ``u``: ``A(t+u) - D(u)`` and ``S(t+u) - S(u)``.

    Asserts that the departure map of the restarted pair is ``D(t+u) - D(u)``.
    """
    if u < 0:
        raise ValidationError("restart time must be nonnegative", "nonnegative_shift")
    if u == 0:
        return A, S
    d_u = float(D.eval(u))
    s_u = float(S.eval(u))
    At = combine(shift(A, u), linear_path(0.0, A.horizon - u, d_u), -1.0)
    St = combine(shift(S, u), linear_path(0.0, S.horizon - u, s_u), -1.0)
    Dt = combine(shift(D, u), linear_path(0.0, D.horizon - u, d_u), -1.0)
    got = phi1(At, St)
    T = min(At.horizon, St.horizon, Dt.horizon)
    gap = sup_distance(got, Dt, T)
    if gap > 1e-9 * max(1.0, float(np.max(np.abs(D.v)))):
        raise ValidationError(f"departures are not the reflection of (A, S): gap {gap}", "phi_consistency")
    return At, St


def check_phi_structure(A: Path, D: Path, S: Path, T: float, tol: float = 1e-9) -> list[str]:
    """Segment-wise checks: a busy station departs at the service rate; an idle one at the arrival rate."""
    t = merge_knots([A, D, S], upto=T)
    issues = []
    for a, b in zip(t[:-1], t[1:]):
        if b - a <= 0:
            continue
        m = 0.5 * (a + b)
        qa, qb = A.eval(a) - D.eval(a), A.eval(b) - D.eval(b)
        dd, sd, ad = D.slope_at(m), S.slope_at(m), A.slope_at(m)
        if A.eval(m) - D.eval(m) > tol:
            if abs(dd - sd) > tol * max(1.0, abs(sd)):
                issues.append(f"busy on ({a:.6g},{b:.6g}) but departure rate {dd} != service rate {sd}")
        elif abs(qa) <= tol and abs(qb) <= tol:
            if abs(dd - ad) > tol * max(1.0, abs(ad)) or ad > sd + tol * max(1.0, abs(sd)):
                issues.append(f"idle on ({a:.6g},{b:.6g}) but rates A'={ad}, D'={dd}, S'={sd}")
    return issues


def _net_horizon(net: NetworkPaths, T: float | None) -> float:
    if T is not None:
        return float(T)
    return min(min(s.horizon for s in net.S), min(x.horizon for x in net.N))


def glue_piecewise_linear(net: NetworkPaths, T: float | None = None, max_events: int = 1_000_000) -> FlowSolution:
    """Advance segment by segment; on each the rates solve a linear fixed point."""
    K = net.K
    T = _net_horizon(net, T)
    A = np.array([float(x.eval(0.0)) for x in net.N])
    D = np.zeros(K)
    times, As, Ds = [0.0], [A.copy()], [D.copy()]
    z = 0.0
    rows = [net.P.row_knots(j) for j in range(K)]
    # input knots in time; segment ends are snapped onto them so that drift in
    # z cannot hide a slope change from next_knot and slope_at
    tknots = merge_knots(list(net.N) + list(net.S), upto=T)
    tknots = np.unique(np.append(tknots[tknots <= T], T))
    for _ in range(max_events):
        if z >= T:
            break
        q = A - D
        qtol = SNAP_TOL * max(1.0, float(np.max(np.abs(A))))
        empty = q <= qtol
        lam = np.array([x.slope_at(z) for x in net.N])
        mu = np.array([s.slope_at(z) for s in net.S])
        Pdot = net.P.slopes_at(D)
        rho = spectral_radius(np.maximum(Pdot, 0.0))
        if not rho < 1:
            raise ValidationError(f"routing derivative has spectral radius {rho} >= 1 at t={z}",
                                  "spectral_radius")
        status = np.where(empty, 0, 1)
        d = _rate_fixed_point(lam, Pdot, mu, status)
        a = lam + Pdot.T @ d
        # next event
        cand = [T]
        for p in list(net.N) + list(net.S):
            nk = p.next_knot(z)
            if nk < np.inf:
                cand.append(nk)
        for j in range(K):
            if d[j] > 0:
                k = int(np.searchsorted(rows[j], D[j] + SNAP_TOL * max(1.0, D[j]), side="right"))
                if k < rows[j].size:
                    cand.append(z + (rows[j][k] - D[j]) / d[j])
        qdot = a - d
        drain = (~empty) & (qdot < 0)
        for i in np.nonzero(drain)[0]:
            cand.append(z + q[i] / -qdot[i])
        z1 = min(cand)
        if z1 <= z:
            z1 = min(c for c in cand if c > z) if any(c > z for c in cand) else T
        kz = int(np.searchsorted(tknots, z1))
        for kk in (kz - 1, kz):
            if 0 <= kk < tknots.size and abs(tknots[kk] - z1) <= SNAP_TOL * max(1.0, z1) and tknots[kk] > z:
                z1 = float(tknots[kk])
        h = z1 - z
        A = A + a * h
        D = D + d * h
        # snap onto the event that ended the segment
        for i in np.nonzero(drain)[0]:
            if abs(z + q[i] / -qdot[i] - z1) <= SNAP_TOL * max(1.0, z1):
                D[i] = A[i]
        D = np.minimum(D, A)
        # snap onto a routing knot; an empty station carries A along so that
        # rounding cannot leave D just short of the knot
        for j in range(K):
            if d[j] > 0:
                k = int(np.searchsorted(rows[j], D[j], side="left"))
                for kk in (k - 1, k):
                    if 0 <= kk < rows[j].size and abs(rows[j][kk] - D[j]) <= 1e-11 * max(1.0, D[j]):
                        if A[j] - D[j] <= qtol + 1e-11 * max(1.0, D[j]):
                            A[j] = max(A[j], rows[j][kk])
                        D[j] = rows[j][kk]
        z = z1
        times.append(z)
        As.append(A.copy())
        Ds.append(D.copy())
    else:
        raise NumericError("segment gluing exceeded the event cap")
    times = np.array(times)
    As, Ds = np.array(As), np.array(Ds)
    Apaths = VectorPath([simplify(PiecewisePath(times, As[:, i], check=False)) for i in range(K)])
    Dpaths = VectorPath([simplify(PiecewisePath(times, Ds[:, i], check=False)) for i in range(K)])
    return FlowSolution(Apaths, Dpaths, T)


def picard_paths(net: NetworkPaths, T: float | None = None, start: str = "zero", tol: float = 1e-9,
                 max_iter: int = 100_000) -> FlowSolution:
    """Monotone Picard iteration ``A = Gamma(D)``, ``D = Phi(A, S)`` on paths.

    From ``D = 0`` the iterates increase; from ``D = S`` they decrease.
    """
    T = _net_horizon(net, T)
    K = net.K
    if start == "zero":
        D = VectorPath([linear_path(0.0, T) for _ in range(K)])
        sign = 1.0
    elif start == "service":
        D = VectorPath([s for s in net.S])
        sign = -1.0
    else:
        raise ValidationError("start must be 'zero' or 'service'", "picard_start")
    for it in range(max_iter):
        A = gamma(D, net.P, net.N)
        newD = phi(A, net.S)
        newD = VectorPath([simplify(_trim(d, T)) for d in newD])
        change = sup_distance(newD, D, T)
        _assert_monotone(D, newD, T, sign)
        D = newD
        if change <= tol:
            A = gamma(D, net.P, net.N)
            A = VectorPath([simplify(_trim(a, T)) for a in A])
            return FlowSolution(A, D, T)
    raise NumericError(f"Picard iteration did not converge in {max_iter} steps", gap=change)


def _trim(p: Path, T: float) -> Path:
    from .paths import restrict
    return restrict(p, T)


def _assert_monotone(old: VectorPath, new: VectorPath, T: float, sign: float) -> None:
    for o, nw in zip(old, new):
        t = merge_knots([o, nw], upto=T)
        diff = sign * (np.asarray(nw.eval(t)) - np.asarray(o.eval(t)))
        if np.min(diff) < -1e-9 * max(1.0, float(np.max(np.abs(o.v)))):
            raise NumericError("Picard iterates are not monotone", gap=float(-np.min(diff)))


def solve_piecewise_linear(net: NetworkPaths, T: float | None = None, cross_check: bool = True) -> FlowSolution:
    """Unique fluid solution of a piecewise-linear network.

    Segment gluing is the primary method; monotone Picard from ``D = 0`` is
    computed alongside and the two must agree within ``1e-6``.
    """
    for p in list(net.S) + list(net.N):
        if p.has_jumps:
            raise ValidationError("piecewise-linear solver needs continuous paths", "continuous")
    sol = glue_piecewise_linear(net, T)
    if cross_check:
        ref = picard_paths(net, sol.horizon)
        gap = max(sup_distance(sol.A, ref.A, sol.horizon), sup_distance(sol.D, ref.D, sol.horizon))
        if gap > 1e-6:
            raise NumericError(f"segment gluing and Picard disagree by {gap}", gap=gap)
    return sol
