"""Rate functions: renewal Legendre transforms, routing KL cost and local rates.

Infinite rates are IEEE ``inf``; sums containing an infinite term stay
infinite and minimizations skip infeasible points.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, special

from .errors import NumericError, ValidationError
from .paths import Path, VectorPath, merge_knots

INF = math.inf
ZERO_TOL = 1e-12
_LOG_FLOOR = 1e-300


# ---------------------------------------------------------------------------
# one-dimensional concave maximization

def _sup_by_root(h, dh, theta_star: float) -> tuple[float, float]:
    """Maximize concave ``h`` on ``(-inf, theta_star)`` via a root of ``dh``."""
    if dh(0.0) >= 0:
        lo = 0.0
        hi = None
        if math.isfinite(theta_star):
            gap = theta_star
            for _ in range(200):
                gap *= 0.5
                cand = theta_star - gap
                if cand <= lo:
                    continue
                d = dh(cand)
                if not (d > 0):
                    hi = cand
                    break
                lo = cand
            if hi is None:
                val = h(theta_star) if math.isfinite(h(theta_star)) else INF
                return val, theta_star
        else:
            cand = 1.0
            while cand < 1e12:
                d = dh(cand)
                if not (d > 0):
                    hi = cand
                    break
                lo = cand
                cand *= 2.0
            if hi is None:
                return (INF, INF) if h(2e12) - h(1e12) > 1e-6 else (h(1e12), 1e12)
    else:
        hi = 0.0
        lo = None
        cand = -1.0
        while cand > -1e12:
            d = dh(cand)
            if d >= 0:
                lo = cand
                break
            hi = cand
            cand *= 2.0
        if lo is None:
            return (INF, -INF) if h(-2e12) - h(-1e12) > 1e-6 else (h(-1e12), -1e12)
    if dh(lo) == 0:
        return h(lo), lo
    if dh(hi) == 0:
        return h(hi), hi
    root = optimize.brentq(dh, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return h(root), root


def _sup_by_golden(h, theta_star: float) -> float:
    """Derivative-free maximization of concave ``h`` on ``(-inf, theta_star)``."""

    def clip(x):
        if math.isfinite(theta_star) and x >= theta_star:
            return None
        return x

    h0 = h(0.0)
    step = 1.0
    if math.isfinite(theta_star):
        step = min(1.0, 0.5 * theta_star) if theta_star > 0 else 1.0
    right = clip(step)
    go_right = right is not None and h(right) > h0
    a, b, hb = 0.0, 0.0, h0
    if go_right:
        a, b, hb = 0.0, right, h(right)
        while True:
            nxt = b + 2.0 * (b - a)
            if math.isfinite(theta_star) and nxt >= theta_star:
                nxt = b + 0.5 * (theta_star - b)
                if nxt <= b:
                    return hb
            hn = h(nxt)
            if not (hn > hb):
                c = nxt
                break
            a, b, hb = b, nxt, hn
            if b > 1e12:
                return INF if h(2 * b) - hb > 1e-6 else hb
            if math.isfinite(theta_star) and theta_star - b < 1e-15 * max(1.0, abs(theta_star)):
                return hb
    else:
        c = right if right is not None else 0.5 * theta_star
        b, hb = 0.0, h0
        a = -step
        while True:
            ha = h(a)
            if not (ha > hb):
                break
            c, b, hb = b, a, ha
            a = b - 2.0 * (c - b)
            if a < -1e12:
                return INF if h(2 * a) - hb > 1e-6 else hb
    if c == b or a == b:
        return hb
    return max(_golden_max(h, a, c), hb)


def _golden_max(h, a: float, c: float, tol: float = 1e-12) -> float:
    """Golden-section search for the maximum of a concave function on ``[a, c]``."""
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = c - inv * (c - a), a + inv * (c - a)
    f1, f2 = h(x1), h(x2)
    while c - a > tol * max(1.0, abs(a) + abs(c)):
        if f1 >= f2:
            c, x2, f2 = x2, x1, f1
            x1 = c - inv * (c - a)
            f1 = h(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv * (c - a)
            f2 = h(x2)
    return max(f1, f2)


def legendre_conjugate(alpha: Callable[[float], float], x: float, theta_star: float = INF,
                       dalpha: Callable[[float], float] | None = None) -> float:
    """``sup_{theta < theta_star} {theta x - alpha(theta)}``."""

    def h(th):
        return th * x - alpha(th)

    if dalpha is not None:
        return _sup_by_root(h, lambda th: x - dalpha(th), theta_star)[0]
    return _sup_by_golden(h, theta_star)


class LegendreMachine:
    """Renewal rate integrand ``g(x) = x alpha*(1/x)`` from a log-MGF.

    ``alpha`` is the log moment generating function of the inter-event time,
    finite on ``(-inf, theta_star)``.  Values are cached per instance.
    """

    def __init__(self, alpha: Callable[[float], float], theta_star: float,
                 dalpha: Callable[[float], float], mean: float, name: str = "renewal"):
        if not mean > 0:
            raise ValidationError("inter-event times must have positive mean", "positive_mean")
        self.alpha = alpha
        self.theta_star = float(theta_star)
        self.dalpha = dalpha
        self.mean = float(mean)
        self.name = name
        self._g: dict[float, float] = {}
        self._theta: dict[float, float] = {}

    @classmethod
    def exponential(cls, rate: float) -> "LegendreMachine":
        """Exponential inter-event times with the given rate."""
        lam = float(rate)
        if lam <= 0:
            raise ValidationError("exponential rate must be positive", "positive_rate")
        return cls(lambda th: -math.log1p(-th / lam) if th < lam else INF, lam,
                   lambda th: 1.0 / (lam - th) if th < lam else INF, 1.0 / lam,
                   f"exponential({lam:g})")

    @classmethod
    def erlang(cls, k: int, rate: float) -> "LegendreMachine":
        """Sum of ``k`` exponential(rate) times."""
        lam = float(rate)
        return cls(lambda th: -k * math.log1p(-th / lam) if th < lam else INF, lam,
                   lambda th: k / (lam - th) if th < lam else INF, k / lam, f"erlang({k},{lam:g})")

    @classmethod
    def deterministic(cls, c: float) -> "LegendreMachine":
        """Constant inter-event time ``c``."""
        c = float(c)
        return cls(lambda th: c * th, INF, lambda th: c, c, f"deterministic({c:g})")

    def conjugate(self, y: float) -> float:
        """``alpha*(y)`` by derivative root finding."""
        return legendre_conjugate(self.alpha, y, self.theta_star, self.dalpha)

    def _route_root(self, x: float) -> tuple[float, float]:
        if x == 0:
            return self.theta_star, self.theta_star
        val, th = _sup_by_root(lambda t: t / x - self.alpha(t), lambda t: 1.0 / x - self.dalpha(t),
                               self.theta_star)
        return x * val, th

    def _route_direct(self, x: float) -> float:
        if x == 0:
            return self.theta_star
        return _sup_by_golden(lambda t: t - x * self.alpha(t), self.theta_star)

    def g(self, x: float) -> float:
        """``g(x) = x alpha*(1/x) = sup_{theta < theta*} {theta - x alpha(theta)}``."""
        x = float(x)
        if x < 0:
            return INF
        if x in self._g:
            return self._g[x]
        v1, th = self._route_root(x)
        v2 = self._route_direct(x)
        if math.isinf(v1) or math.isinf(v2):
            if math.isinf(v1) != math.isinf(v2) and min(v1, v2) < 1e6:
                raise NumericError(f"renewal rate routes disagree at x={x}: {v1} vs {v2}")
            val = INF
        else:
            if abs(v1 - v2) > 1e-8 * max(1.0, abs(v1)):
                raise NumericError(f"renewal rate routes disagree at x={x}: {v1} vs {v2}",
                                   gap=abs(v1 - v2))
            val = max(v1, 0.0)
        self._g[x] = val
        self._theta[x] = th
        return val

    def g_derivative(self, x: float) -> float:
        """``g'(x) = -alpha(theta_x)`` at the maximizing ``theta_x``."""
        if self.g(x) == INF:
            return INF
        th = self._theta[float(x)]
        if not math.isfinite(th):
            return -INF if th == INF else INF
        return -self.alpha(th)


# ---------------------------------------------------------------------------
# rate-function families

class RateFunction:
    """Convex ``[0, inf]``-valued function with a unique zero at ``minimizer``."""

    minimizer: float = 0.0
    domain: tuple[float, float] = (0.0, INF)
    domain_right_open: bool = True
    family: str = "abstract"
    params: dict = {}

    def value(self, x: float) -> float:
        raise NotImplementedError

    def __call__(self, x):
        if np.ndim(x) == 0:
            return self.value(float(x))
        return np.array([self.value(float(v)) for v in np.ravel(x)]).reshape(np.shape(x))

    evaluate = __call__

    def derivative(self, x: float) -> float:
        h = 1e-7 * max(1.0, abs(x))
        return (self.value(x + h) - self.value(x - h)) / (2 * h)

    def bounds(self) -> tuple[float, float | None]:
        lo, hi = self.domain
        return lo, (None if math.isinf(hi) else hi)

    def cumulant(self, s):
        """Convex conjugate ``sup_x (s x - I(x))``, numerically on the domain."""
        if np.ndim(s) > 0:
            return np.array([self.cumulant(float(v)) for v in np.ravel(s)]).reshape(np.shape(s))
        lo, hi = self.domain
        if hi - lo <= 0:
            return s * lo
        if math.isinf(hi):
            hi = self.minimizer + 1.0
            while s * hi - self.value(hi) > s * (0.5 * hi) - self.value(0.5 * hi):
                hi *= 2.0
                if hi > 1e12:
                    return INF
        res = optimize.minimize_scalar(lambda x: self.value(x) - s * x, bounds=(lo, hi),
                                       method="bounded", options={"xatol": 1e-12})
        ends = [s * lo - self.value(lo), s * hi - self.value(hi)]
        return float(max(-res.fun, *ends))

    def to_json(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.params})"


class PoissonRate(RateFunction):
    """``x log(x / lam) - x + lam``, the rate integrand of a Poisson(lam) process."""

    family = "poisson"

    def __init__(self, lam: float):
        lam = float(lam)
        if lam < 0:
            raise ValidationError("Poisson rate must be nonnegative", "nonnegative_rate")
        self.lam = lam
        self.minimizer = lam
        self.domain = (0.0, INF) if lam > 0 else (0.0, 0.0)
        self.domain_right_open = lam > 0
        self.params = {"rate": lam}

    def __call__(self, x):
        xa = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = special.rel_entr(xa, self.lam) - xa + self.lam
        out = np.where(xa < 0, INF, out)
        return float(out) if out.ndim == 0 else out

    evaluate = __call__

    def value(self, x: float) -> float:
        return self(x)

    def derivative(self, x: float) -> float:
        if x <= 0 or self.lam == 0:
            return -INF if self.lam > 0 else INF
        return math.log(x / self.lam)

    def cumulant(self, s):
        return self.lam * np.expm1(s)


class RenewalRate(RateFunction):
    """``g(x) = x alpha*(1/x)`` for a renewal process, via :class:`LegendreMachine`."""

    family = "renewal"

    def __init__(self, machine: LegendreMachine, params: dict | None = None):
        self.machine = machine
        self.minimizer = 1.0 / machine.mean
        g0 = machine.g(0.0)
        self.domain = (0.0 if math.isfinite(g0) else 0.0, INF)
        self.domain_right_open = True
        self.params = params or {"distribution": machine.name}

    @classmethod
    def exponential(cls, rate: float) -> "RenewalRate":
        return cls(LegendreMachine.exponential(rate), {"distribution": "exponential", "rate": rate})

    @classmethod
    def erlang(cls, k: int, rate: float) -> "RenewalRate":
        return cls(LegendreMachine.erlang(k, rate), {"distribution": "erlang", "k": k, "rate": rate})

    def to_json(self) -> dict:
        params = {k: v for k, v in self.params.items() if k != "distribution"}
        return {"family": self.params.get("distribution", self.family), "params": params}

    def value(self, x: float) -> float:
        return self.machine.g(x)

    def derivative(self, x: float) -> float:
        return self.machine.g_derivative(x)


class DeterministicRate(RateFunction):
    """Rate of a deterministic clock with period ``c``: 0 at ``1/c``, infinite elsewhere."""

    family = "deterministic"

    def __init__(self, c: float):
        c = float(c)
        if c <= 0:
            raise ValidationError("deterministic period must be positive", "positive_period")
        self.c = c
        self.minimizer = 1.0 / c
        self.domain = (1.0 / c, 1.0 / c)
        self.domain_right_open = False
        self.params = {"period": c}

    def value(self, x: float) -> float:
        return 0.0 if abs(x - self.minimizer) <= ZERO_TOL * max(1.0, self.minimizer) else INF

    def derivative(self, x: float) -> float:
        return 0.0


class TabulatedRate(RateFunction):
    """Convex function given by samples, linearly interpolated, infinite outside."""

    family = "tabulated"

    def __init__(self, xs: Sequence[float], values: Sequence[float], right_open: bool = False):
        xs = np.asarray(xs, dtype=float)
        vals = np.asarray(values, dtype=float)
        if xs.ndim != 1 or xs.size < 2 or vals.shape != xs.shape or np.any(np.diff(xs) <= 0):
            raise ValidationError("tabulated rate needs increasing abscissae", "tabulated_shape")
        if np.any(vals < 0):
            raise ValidationError("rate functions are nonnegative", "nonnegative")
        slopes = np.diff(vals) / np.diff(xs)
        if np.any(np.diff(slopes) < -1e-12 * np.maximum(1.0, np.abs(slopes[1:]))):
            raise ValidationError("tabulated rate must be convex", "convex")
        zeros = np.nonzero(vals <= ZERO_TOL)[0]
        if zeros.size != 1:
            raise ValidationError("tabulated rate needs a unique zero", "unique_minimizer")
        self.xs, self.vals, self.slopes = xs, vals, slopes
        self.minimizer = float(xs[zeros[0]])
        self.domain = (float(xs[0]), float(xs[-1]))
        self.domain_right_open = bool(right_open)
        self.params = {"x": xs.tolist(), "value": vals.tolist(), "right_open": bool(right_open)}

    def value(self, x: float) -> float:
        if x < self.xs[0] - ZERO_TOL or x > self.xs[-1] + ZERO_TOL:
            return INF
        return float(np.interp(x, self.xs, self.vals))

    def derivative(self, x: float) -> float:
        k = int(np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, self.slopes.size - 1))
        return float(self.slopes[k])


class PointRate(RateFunction):
    """Indicator rate: 0 at ``x0``, infinite elsewhere (e.g. the initial condition)."""

    family = "point"

    def __init__(self, x0: float = 0.0):
        self.x0 = float(x0)
        self.minimizer = self.x0
        self.domain = (self.x0, self.x0)
        self.domain_right_open = False
        self.params = {"at": self.x0}

    def value(self, x: float) -> float:
        return 0.0 if abs(x - self.x0) <= ZERO_TOL else INF

    def derivative(self, x: float) -> float:
        return 0.0


def rate_from_json(obj: dict) -> RateFunction:
    fam = obj.get("family")
    p = obj.get("params", {})
    try:
        if fam == "poisson":
            return PoissonRate(p["rate"])
        if fam == "exponential":
            return RenewalRate.exponential(p["rate"])
        if fam == "erlang":
            return RenewalRate.erlang(int(p["k"]), p["rate"])
        if fam == "deterministic":
            return DeterministicRate(p["period"])
        if fam == "point":
            return PointRate(p["at"])
        if fam == "tabulated":
            return TabulatedRate(p["x"], p["value"], bool(p.get("right_open", False)))
    except KeyError as exc:
        raise ValidationError(f"missing rate parameter {exc}", "rate_params") from None
    raise ValidationError(f"unknown rate family {fam!r}", "rate_family")


# ---------------------------------------------------------------------------
# routing cost

def _extend(row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=float)
    exit_mass = 1.0 - row.sum()
    if exit_mass < -1e-12 or np.any(row < 0):
        raise ValidationError("routing rows must be subprobability vectors", "subprobability")
    return np.append(row, max(exit_mass, 0.0))


def kl_tilde(p_row: Sequence[float], r_row: Sequence[float]) -> float:
    """KL divergence of two routing rows extended by their exit mass."""
    p = _extend(np.asarray(p_row, dtype=float))
    r = _extend(np.asarray(r_row, dtype=float))
    return float(np.sum(special.rel_entr(p, r)))


def perspective_kl(d: float, flows: np.ndarray, r_row: np.ndarray) -> float:
    """``d * kl_tilde(flows / d, r_row)`` with its closure at ``d = 0``."""
    flows = np.asarray(flows, dtype=float)
    r_row = np.asarray(r_row, dtype=float)
    out_mass = flows.sum()
    e = d - out_mass
    if e < -1e-12 * max(1.0, d) or np.any(flows < 0):
        return INF
    e = max(e, 0.0)
    if d <= 0:
        return 0.0 if out_mass <= 0 else INF
    r_exit = max(1.0 - r_row.sum(), 0.0)
    return float(np.sum(special.rel_entr(flows, d * r_row)) + special.rel_entr(e, d * r_exit))


# ---------------------------------------------------------------------------
# path-level rate of a network

@dataclass
class RateBreakdown:
    total: float
    service: list
    routing: list
    exogenous: list
    initial: float

    def to_json(self) -> dict:
        def f(x):
            return "inf" if x == INF else float(x)

        return {
            "value": f(self.total),
            "service": [f(v) for v in self.service],
            "routing": [f(v) for v in self.routing],
            "exogenous": [f(v) for v in self.exogenous],
            "initial": f(self.initial),
        }


def _slope_integral(path: Path, rate: Callable[[float], float], upto: float) -> float:
    """``int_0^upto rate(path'(s)) ds`` for a continuous piecewise-linear path."""
    if path.has_jumps:
        raise ValidationError("rate integrals need continuous piecewise-linear paths",
                              "absolutely_continuous")
    if upto <= 0:
        return 0.0
    t = path.t[path.t < upto]
    t = np.append(t, upto)
    total = 0.0
    for a, b in zip(t[:-1], t[1:]):
        if b <= a:
            continue
        v = rate(path.slope_at(0.5 * (a + b)))
        if v == INF:
            return INF
        total += (b - a) * v
    if upto > path.horizon and path.tail_slope is not None:
        pass
    return total


def _segment_integral_multi(paths: Sequence[Path], integrand, upto: float) -> float:
    if upto <= 0:
        return 0.0
    for p in paths:
        if p.has_jumps:
            raise ValidationError("rate integrals need continuous piecewise-linear paths",
                                  "absolutely_continuous")
    knots = merge_knots(paths, upto=upto)
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b <= a:
            continue
        m = 0.5 * (a + b)
        v = integrand(np.array([p.slope_at(m) for p in paths]))
        if v == INF:
            return INF
        total += (b - a) * v
    return total


def path_rate_net_breakdown(net, model, T: float, routing_range: Sequence[float] | None = None) -> RateBreakdown:
    """Per-term rate of a piecewise-linear network triple on ``[0, T]``.

    Row ``j`` of the routing path is charged over ``[0, routing_range[j]]``
    (default ``T``); the routing cost is an integral in the departure
    coordinate of that row.
    """
    K = model.K
    R = model.R
    service = [_slope_integral(net.S[i], model.service[i], T) for i in range(K)]
    exo = []
    for i in range(K):
        if model.exogenous[i] is None:
            slopes_pos = any(net.N[i].slope_at(float(s)) > ZERO_TOL for s in net.N[i].t[net.N[i].t < T])
            exo.append(INF if slopes_pos else 0.0)
        else:
            exo.append(_slope_integral(net.N[i], model.exogenous[i], T))
    rr = [T] * K if routing_range is None else list(routing_range)
    routing = [
        _segment_integral_multi(net.P.row(j), lambda s, j=j: kl_tilde(np.maximum(s, 0.0), R[j]), rr[j])
        for j in range(K)
    ]
    init = sum(model.initial(float(net.N[i].v[0])) for i in range(K))
    terms = service + routing + exo + [init]
    total = INF if any(x == INF for x in terms) else float(sum(terms))
    return RateBreakdown(total, service, routing, exo, init)


def path_rate_net(net, model, T: float, routing_range: Sequence[float] | None = None) -> float:
    """Rate of a piecewise-linear network triple on ``[0, T]``."""
    return path_rate_net_breakdown(net, model, T, routing_range).total


# ---------------------------------------------------------------------------
# local rates H and H^Q

@dataclass
class LocalRateProblem:
    """State and velocity for a local rate evaluation.

    ``mode='AD'`` uses ``state=(A, D)`` and ``velocity=(A_dot, D_dot)``;
    ``mode='Q'`` uses ``state=Q`` and ``velocity=Q_dot``.
    """

    mode: str
    state: object
    velocity: object
    model: object

    def empty_set(self) -> np.ndarray:
        if self.mode == "AD":
            A, D = (np.asarray(x, dtype=float) for x in self.state)
            return np.abs(A - D) <= ZERO_TOL
        Q = np.asarray(self.state, dtype=float)
        if np.any(Q < -ZERO_TOL):
            raise ValidationError("queue lengths must be nonnegative", "nonnegative_queue")
        return np.abs(Q) <= ZERO_TOL


@dataclass
class LocalRateResult:
    value: float
    D: np.ndarray | None = None
    P: np.ndarray | None = None
    N: np.ndarray | None = None
    certificate: dict | None = None

    def to_json(self) -> dict:
        out = {"value": "inf" if self.value == INF else float(self.value)}
        for k in ("D", "P", "N"):
            v = getattr(self, k)
            if v is not None:
                out[k] = np.asarray(v).tolist()
        if self.certificate is not None:
            out["certificate"] = self.certificate
        return out


class _FlowProgram:
    """Variables ``x = (D?, F on support(R), N on exogenous set)`` and linear constraints.

    Service modes per station: ``'fixed'`` (D given, cost charged outside),
    ``'full'`` (cost I(D)), ``'capped'`` (cost I(max(D, mu))), ``'below'``
    (D <= mu, no cost), ``'above'`` (D >= mu, cost I(D)).
    """

    def __init__(self, model, target: np.ndarray, D_fixed: np.ndarray | None, modes: Sequence[str]):
        K = model.K
        R = np.asarray(model.R, dtype=float)
        self.model, self.K, self.R = model, K, R
        self.r_exit = np.maximum(1.0 - R.sum(axis=1), 0.0)
        self.modes = list(modes)
        self.D_fixed = None if D_fixed is None else np.asarray(D_fixed, dtype=float)
        self.free_D = D_fixed is None
        self.support = [(i, j) for i in range(K) for j in range(K) if R[i, j] > 0]
        self.exo = [i for i in range(K) if model.exogenous[i] is not None]
        nD = K if self.free_D else 0
        self.iD = np.arange(nD)
        self.iF = nD + np.arange(len(self.support))
        self.iN = nD + len(self.support) + np.arange(len(self.exo))
        self.n = nD + len(self.support) + len(self.exo)
        # equality: inflow balance per station
        Aeq = np.zeros((K, self.n))
        beq = np.asarray(target, dtype=float).copy()
        for k, (i, j) in enumerate(self.support):
            Aeq[j, self.iF[k]] += 1.0
        for k, i in enumerate(self.exo):
            Aeq[i, self.iN[k]] += 1.0
        if self.free_D:
            Aeq[np.arange(K), self.iD] -= 1.0
        # rows: sum_j F_ij <= D_i, with equality when there is no exit
        Arow = np.zeros((K, self.n))
        brow = np.zeros(K)
        for k, (i, j) in enumerate(self.support):
            Arow[i, self.iF[k]] += 1.0
        if self.free_D:
            Arow[np.arange(K), self.iD] -= 1.0
        else:
            brow = self.D_fixed.copy()
        no_exit = self.r_exit <= 0
        self.Aeq = np.vstack([Aeq, Arow[no_exit]])
        self.beq = np.concatenate([beq, brow[no_exit]])
        self.Aub = Arow[~no_exit]
        self.bub = brow[~no_exit]
        self.bounds = []
        if self.free_D:
            for i in range(K):
                lo, hi = model.service[i].bounds()
                mu = model.service[i].minimizer
                mode = self.modes[i]
                if mode in ("capped", "below"):
                    lo = 0.0
                if mode == "below":
                    hi = mu if hi is None else min(hi, mu)
                if mode == "above":
                    lo = max(lo, mu)
                self.bounds.append((lo, hi))
        self.bounds += [(0.0, None)] * len(self.support)
        for i in self.exo:
            self.bounds.append(model.exogenous[i].bounds())

    def D_of(self, x: np.ndarray) -> np.ndarray:
        return x[self.iD] if self.free_D else self.D_fixed

    def flows(self, x: np.ndarray) -> np.ndarray:
        F = np.zeros((self.K, self.K))
        for k, (i, j) in enumerate(self.support):
            F[i, j] = x[self.iF[k]]
        return F

    def N_of(self, x: np.ndarray) -> np.ndarray:
        N = np.zeros(self.K)
        N[self.exo] = x[self.iN]
        return N

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        D = self.D_of(x)
        F = self.flows(x)
        total = 0.0
        for i in range(self.K):
            if self.free_D:
                mode = self.modes[i]
                rate = self.model.service[i]
                if mode == "capped":
                    total += rate(max(D[i], rate.minimizer))
                elif mode in ("full", "above"):
                    total += rate(D[i])
            # max with the row outflow leaves feasible points unchanged and keeps
            # slightly infeasible optimizer iterates finite
            Fi = np.maximum(F[i], 0.0)
            total += perspective_kl(max(D[i], float(Fi.sum()), 0.0), Fi, self.R[i])
        for k, i in enumerate(self.exo):
            total += self.model.exogenous[i](x[self.iN[k]])
        return total

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(self.n)
        D = np.maximum(self.D_of(x), 0.0)
        F = np.maximum(self.flows(x), 0.0)
        e = np.maximum(D - F.sum(axis=1), _LOG_FLOOR)
        with np.errstate(divide="ignore"):
            log_e = np.where(self.r_exit > 0,
                             np.log(e) - np.log(np.maximum(D * self.r_exit, _LOG_FLOOR)), 0.0)
        for k, (i, j) in enumerate(self.support):
            g[self.iF[k]] = (math.log(max(F[i, j], _LOG_FLOOR))
                             - math.log(max(D[i] * self.R[i, j], _LOG_FLOOR)) - log_e[i])
        if self.free_D:
            for i in range(self.K):
                rate = self.model.service[i]
                mode = self.modes[i]
                gi = log_e[i] if self.r_exit[i] > 0 else 0.0
                if self.r_exit[i] <= 0:
                    # no exit column: d/dD of sum F log(F / (D R)) is -sum(F)/D
                    gi = -F[i].sum() / max(D[i], _LOG_FLOOR)
                if mode in ("full", "above") or (mode == "capped" and D[i] > rate.minimizer):
                    gi += _finite(rate.derivative(float(D[i])))
                g[self.iD[i]] = gi
        for k, i in enumerate(self.exo):
            g[self.iN[k]] = _finite(self.model.exogenous[i].derivative(float(x[self.iN[k]])))
        return g

    def _lp_bounds(self):
        return [(lo, hi) for lo, hi in self.bounds]

    def phase_one(self):
        """LP feasibility check; returns an interior-leaning start or a certificate."""
        n = self.n
        m_eq = self.Aeq.shape[0]
        if n == 0:
            res = self.Aeq @ np.zeros(0) - self.beq if m_eq else np.zeros(0)
            if np.all(np.abs(res) <= 1e-9) and np.all(self.bub >= -1e-9):
                return np.zeros(0), None
            return None, {"residual": np.abs(res).tolist()}
        # minimize |Aeq x - beq|_1 via slack variables
        c = np.concatenate([np.zeros(n), np.ones(2 * m_eq)])
        Aeq = np.hstack([self.Aeq, np.eye(m_eq), -np.eye(m_eq)])
        Aub = np.hstack([self.Aub, np.zeros((self.Aub.shape[0], 2 * m_eq))]) if self.Aub.size else None
        bounds = self._lp_bounds() + [(0.0, None)] * (2 * m_eq)
        res = optimize.linprog(c, A_ub=Aub, b_ub=self.bub if Aub is not None else None,
                               A_eq=Aeq, b_eq=self.beq, bounds=bounds, method="highs")
        if res.status != 0:
            raise NumericError(f"feasibility LP failed: {res.message}")
        if res.fun > 1e-9:
            slack = res.x[n:n + m_eq] - res.x[n + m_eq:]
            return None, {"infeasibility": float(res.fun),
                          "station_residual": slack[:self.K].tolist()}
        # push away from the bounds where possible
        c2 = np.zeros(n + 1)
        c2[-1] = -1.0
        rows, rhs = [], []
        for k, (lo, hi) in enumerate(self.bounds):
            r = np.zeros(n + 1)
            if lo is not None and math.isfinite(lo):
                r[k], r[-1] = -1.0, 1.0
                rows.append(r.copy())
                rhs.append(-lo)
            if hi is not None and math.isfinite(hi):
                r[:] = 0.0
                r[k], r[-1] = 1.0, 1.0
                rows.append(r.copy())
                rhs.append(hi)
        for r_ub, b in zip(self.Aub, self.bub):
            rows.append(np.append(r_ub, 1.0))
            rhs.append(b)
        Aeq2 = np.hstack([self.Aeq, np.zeros((m_eq, 1))])
        bnds = self._lp_bounds() + [(0.0, 1.0)]
        res2 = optimize.linprog(c2, A_ub=np.array(rows) if rows else None,
                                b_ub=np.array(rhs) if rows else None,
                                A_eq=Aeq2, b_eq=self.beq, bounds=bnds, method="highs")
        if res2.status == 0:
            return res2.x[:n], None
        return res.x[:n], None


def _finite(v: float, big: float = 1e6) -> float:
    if math.isnan(v):
        return 0.0
    return float(np.clip(v, -big, big))


def _solve_program(prog: _FlowProgram, outside: float = 0.0) -> LocalRateResult:
    x0, cert = prog.phase_one()
    if x0 is None:
        return LocalRateResult(INF, certificate=cert)
    if outside == INF:
        return LocalRateResult(INF, certificate={"service": "infinite"})
    if prog.n == 0:
        val = prog.objective(x0) + outside
        return _result(prog, x0, val)
    cons = [{"type": "eq", "fun": lambda x: prog.Aeq @ x - prog.beq, "jac": lambda x: prog.Aeq}]
    if prog.Aub.size:
        cons.append({"type": "ineq", "fun": lambda x: prog.bub - prog.Aub @ x,
                     "jac": lambda x: -prog.Aub})
    bounds = [(lo, hi) for lo, hi in prog.bounds]

    def fun(x):
        x = _clip_bounds(x, bounds)
        v = prog.objective(x)
        return v if math.isfinite(v) else 1e12

    def jac(x):
        return prog.gradient(_clip_bounds(x, bounds))

    best_x, best_v = x0, fun(x0)
    for _ in range(3):
        res = optimize.minimize(fun, best_x, jac=jac, method="SLSQP", bounds=bounds,
                                constraints=cons, options={"ftol": 1e-15, "maxiter": 1000})
        x = _clip_bounds(res.x, bounds)
        feas = np.max(np.abs(prog.Aeq @ x - prog.beq)) if prog.Aeq.size else 0.0
        if prog.Aub.size:
            feas = max(feas, float(np.max(prog.Aub @ x - prog.bub)))
        v = fun(x)
        if feas <= 1e-9 and v < best_v - 1e-14:
            best_x, best_v = x, v
        else:
            break
    return _result(prog, best_x, best_v + outside)


def _clip_bounds(x, bounds):
    lo = np.array([(-INF if b[0] is None else b[0]) for b in bounds])
    hi = np.array([(INF if b[1] is None else b[1]) for b in bounds])
    return np.clip(x, lo, hi)


def _result(prog: _FlowProgram, x: np.ndarray, val: float) -> LocalRateResult:
    D = prog.D_of(x)
    F = prog.flows(x)
    P = np.array([F[i] / D[i] if D[i] > 0 else prog.R[i] for i in range(prog.K)])
    return LocalRateResult(max(float(val), 0.0), D=np.array(D, dtype=float), P=P, N=prog.N_of(x))


def local_rate_H(problem: LocalRateProblem) -> LocalRateResult:
    """``H(A, D, A_dot, D_dot)``: cheapest routing and exogenous rates for given velocities."""
    if problem.mode != "AD":
        raise ValidationError("local_rate_H expects mode 'AD'", "mode")
    model = problem.model
    Adot, Ddot = (np.asarray(v, dtype=float) for v in problem.velocity)
    if np.any(Adot < -ZERO_TOL) or np.any(Ddot < -ZERO_TOL):
        raise ValidationError("velocities must be nonnegative", "nonnegative_velocity")
    Ddot = np.maximum(Ddot, 0.0)
    empty = problem.empty_set()
    outside = 0.0
    for i in range(model.K):
        rate = model.service[i]
        if empty[i] and Ddot[i] <= rate.minimizer:
            continue
        v = rate(Ddot[i])
        if v == INF:
            outside = INF
            break
        outside += v
    prog = _FlowProgram(model, Adot, Ddot, ["fixed"] * model.K)
    return _solve_program(prog, outside)


def local_rate_HQ(problem: LocalRateProblem, modes: Sequence[str] | None = None) -> LocalRateResult:
    """``H^Q(Q, Q_dot)``: cheapest departure, routing and exogenous rates.

    For empty stations the service cost is ``I(max(D, mu))``, which is convex,
    so one convex program covers every regime.  ``modes`` overrides the
    per-station treatment (see :class:`_FlowProgram`).
    """
    if problem.mode != "Q":
        raise ValidationError("local_rate_HQ expects mode 'Q'", "mode")
    model = problem.model
    Qdot = np.asarray(problem.velocity, dtype=float)
    if not np.all(np.isfinite(Qdot)):
        raise ValidationError("queue velocity must be finite", "finite_velocity")
    empty = problem.empty_set()
    if modes is None:
        modes = ["capped" if empty[i] else "full" for i in range(model.K)]
    prog = _FlowProgram(model, Qdot, None, modes)
    return _solve_program(prog)


def local_rate_HQ_enumerated(problem: LocalRateProblem) -> LocalRateResult:
    """Minimum over the ``below``/``above`` split of every empty station."""
    empty = np.nonzero(problem.empty_set())[0]
    if empty.size > 20:
        raise ValidationError("too many empty stations to enumerate", "regime_cap")
    best = LocalRateResult(INF)
    for choice in itertools.product(("below", "above"), repeat=empty.size):
        modes = ["full"] * problem.model.K
        for i, c in zip(empty, choice):
            modes[i] = c
        res = local_rate_HQ(problem, modes)
        if res.value < best.value:
            best = res
    return best


def H(model, A, D, Adot, Ddot) -> float:
    return local_rate_H(LocalRateProblem("AD", (A, D), (Adot, Ddot), model)).value


def HQ(model, Q, Qdot) -> float:
    return local_rate_HQ(LocalRateProblem("Q", Q, Qdot, model)).value


# ---------------------------------------------------------------------------
# brute-force oracle

def grid_oracle(problem: LocalRateProblem, step: float = 1e-3, box: float = 6.0,
                points: int = 41) -> float:
    """Zooming grid search over the free variables of the local-rate program.

    Equality constraints are eliminated by solving for a set of basic
    variables; the remaining free variables are scanned on a grid that is
    refined around the incumbent until its spacing reaches ``step``.
    """
    model = problem.model
    if problem.mode == "AD":
        Adot, Ddot = (np.asarray(v, dtype=float) for v in problem.velocity)
        empty = problem.empty_set()
        outside = 0.0
        for i in range(model.K):
            rate = model.service[i]
            if not (empty[i] and Ddot[i] <= rate.minimizer):
                outside += rate(Ddot[i])
        if outside == INF:
            return INF
        prog = _FlowProgram(model, Adot, Ddot, ["fixed"] * model.K)
    else:
        empty = problem.empty_set()
        modes = ["capped" if empty[i] else "full" for i in range(model.K)]
        prog = _FlowProgram(model, np.asarray(problem.velocity, dtype=float), None, modes)
        outside = 0.0
    n = prog.n
    Aeq, beq = prog.Aeq, prog.beq
    lo = np.array([b[0] if b[0] is not None else 0.0 for b in prog.bounds])
    hi = np.array([b[1] if b[1] is not None else box for b in prog.bounds])
    if n == 0:
        ok = np.all(np.abs(beq) <= 1e-9) if beq.size else True
        return prog.objective(np.zeros(0)) + outside if ok else INF
    # choose basic variables by pivoted QR on the equality matrix
    if Aeq.size:
        rank = np.linalg.matrix_rank(Aeq)
        from scipy.linalg import qr
        _, _, piv = qr(Aeq, pivoting=True)
        basic = np.sort(piv[:rank])
    else:
        rank, basic = 0, np.array([], dtype=int)
    free = np.array([k for k in range(n) if k not in set(basic.tolist())], dtype=int)
    B = Aeq[:, basic]
    Fm = Aeq[:, free]

    def complete(z: np.ndarray) -> np.ndarray:
        x = np.zeros((z.shape[0], n))
        x[:, free] = z
        if basic.size:
            rhs = beq[None, :] - z @ Fm.T
            xb, *_ = np.linalg.lstsq(B, rhs.T, rcond=None)
            x[:, basic] = xb.T
        return x

    def values(z: np.ndarray) -> np.ndarray:
        x = complete(z)
        out = np.full(x.shape[0], INF)
        ok = np.all(x >= lo - 1e-12, axis=1) & np.all(x <= hi + 1e-12, axis=1)
        if basic.size:
            ok &= np.max(np.abs(x @ Aeq.T - beq), axis=1) <= 1e-9
        if prog.Aub.size:
            ok &= np.all(x @ prog.Aub.T <= prog.bub + 1e-12, axis=1)
        for k in np.nonzero(ok)[0]:
            out[k] = prog.objective(np.clip(x[k], lo, hi))
        return out

    if free.size == 0:
        return float(values(np.zeros((1, 0)))[0]) + outside
    zlo, zhi = lo[free].copy(), hi[free].copy()
    best_z, best_v = None, INF
    pts = points if free.size <= 2 else (15 if free.size == 3 else 9)
    while True:
        axes = [np.linspace(a, b, pts) for a, b in zip(zlo, zhi)]
        grid = np.array(list(itertools.product(*axes)))
        vals = values(grid)
        k = int(np.argmin(vals))
        if vals[k] < best_v:
            best_v, best_z = float(vals[k]), grid[k]
        spacing = (zhi - zlo) / (pts - 1)
        if best_z is None:
            return INF
        if np.all(spacing <= step):
            break
        half = 2.0 * spacing
        zlo = np.maximum(best_z - half, lo[free])
        zhi = np.minimum(best_z + half, hi[free])
    return best_v + outside


def dual_grid_oracle(problem: LocalRateProblem, box: float = 8.0, points: int = 41,
                     step: float = 1e-7) -> float:
    """``H^Q`` from the dual side: maximize the concave dual over station prices.

    For prices ``theta`` the dual value is ``theta . Q_dot`` minus the
    exogenous cumulants at ``theta_i`` and the service cumulants at
    ``log(sum_j R_ij e^theta_j + r_i) - theta_i``; an empty station uses the
    service cumulant at the positive part of its argument.  Every grid value
    is a lower bound on ``H^Q``.
    """
    if problem.mode != "Q":
        raise ValidationError("dual_grid_oracle expects mode 'Q'", "mode")
    model = problem.model
    K = model.K
    R = np.asarray(model.R, dtype=float)
    r_exit = np.maximum(1.0 - R.sum(axis=1), 0.0)
    Qdot = np.asarray(problem.velocity, dtype=float)
    empty = problem.empty_set()

    def dual(theta: np.ndarray) -> np.ndarray:
        out = theta @ Qdot
        for i in range(K):
            if model.exogenous[i] is not None:
                out = out - model.exogenous[i].cumulant(theta[:, i])
            route = np.log(np.exp(theta) @ R[i] + r_exit[i]) - theta[:, i]
            if empty[i]:
                route = np.maximum(route, 0.0)
            out = out - model.service[i].cumulant(route)
        return np.where(np.isfinite(out), out, -INF)

    # halve the window around the incumbent each round so that long ridges
    # of the concave dual are followed rather than cut off
    half = np.full(K, float(box))
    center = np.zeros(K)
    best_v = -INF
    while True:
        axes = [np.linspace(c - h, c + h, points) for c, h in zip(center, half)]
        grid = np.array(list(itertools.product(*axes)))
        vals = dual(grid)
        k = int(np.argmax(vals))
        if vals[k] > best_v:
            best_v, center = float(vals[k]), grid[k]
        if np.all(2.0 * half / (points - 1) <= step):
            break
        half = 0.5 * half
    return max(best_v, 0.0)


def hq_single_station_oracle(arrival: RateFunction, service: RateFunction, qdot: float,
                             step: float = 1e-4, upper: float = 10.0) -> float:
    """``min_x I_N(x + qdot) + I_S(x)`` on a uniform grid: the nonempty single-station H^Q."""
    x = np.arange(0.0, upper + step / 2, step)
    x = x[x + qdot >= 0]
    vals = np.asarray(arrival(x + qdot), dtype=float) + np.asarray(service(x), dtype=float)
    return float(np.min(vals))


# ---------------------------------------------------------------------------
# queue-path rate

def path_rate_Q(Q, model, T: float, detail: bool = False):
    """``int_0^T H^Q(Q(s), Q'(s)) ds`` for a continuous piecewise-linear queue path."""
    comps = list(Q.components if isinstance(Q, VectorPath) else [Q])
    if len(comps) != model.K:
        raise ValidationError("queue path dimension differs from the model", "dimension")
    for c in comps:
        if c.has_jumps:
            raise ValidationError("queue path must be continuous", "absolutely_continuous")
        if np.any(c.v < -ZERO_TOL):
            raise ValidationError("queue path must be nonnegative", "nonnegative_queue")
    q0 = np.array([c.v[0] for c in comps])
    init = sum(model.initial(float(v)) for v in q0)
    if init == INF:
        if detail:
            return INF, []
        return INF
    knots = merge_knots(comps, upto=T)
    total, rows = 0.0, []
    for a, b in zip(knots[:-1], knots[1:]):
        if b <= a:
            continue
        m = 0.5 * (a + b)
        state = np.array([max(c.eval(m), 0.0) for c in comps])
        state[state <= ZERO_TOL] = 0.0
        vel = np.array([c.slope_at(m) for c in comps])
        res = local_rate_HQ(LocalRateProblem("Q", state, vel, model))
        rows.append({"start": float(a), "end": float(b), "qdot": vel.tolist(),
                     "empty": (state == 0).tolist(),
                     "value": "inf" if res.value == INF else float(res.value)})
        if res.value == INF:
            total = INF
            break
        total += (b - a) * res.value
    total += init
    return (total, rows) if detail else total


def two_segment_value(model, station: int, q: float, T: float, grid: int = 21) -> tuple[float, dict]:
    """Cheapest two-segment queue path from 0 to level ``q`` at time ``T``.

    Single-station models only.  The path rises linearly to ``level`` at
    ``kink`` and then linearly to ``q`` at ``T``.  An upper bound on the
    variational value over all paths.
    """
    if model.K != 1 or station != 0:
        raise ValidationError("two-segment companion supports single-station models", "single_station")
    if q <= 0:
        return 0.0, {"kink": 0.0, "level": 0.0}
    cache: dict[tuple[bool, float], float] = {}

    def seg(level_from: float, level_to: float, length: float) -> float:
        if length <= 0:
            return 0.0 if abs(level_to - level_from) <= 1e-12 else INF
        slope = (level_to - level_from) / length
        empty = max(level_from, level_to) <= ZERO_TOL
        key = (empty, round(slope, 14))
        if key not in cache:
            state = np.array([0.0 if empty else 1.0])
            cache[key] = local_rate_HQ(LocalRateProblem("Q", state, np.array([slope]), model)).value
        return length * cache[key]

    def cost(kink: float, level: float) -> float:
        kink = float(np.clip(kink, 0.0, T))
        level = max(float(level), 0.0)
        if kink == 0:
            return seg(0.0, q, T)
        return seg(0.0, level, kink) + seg(level, q, T - kink)

    best = (INF, 0.0, 0.0)
    for kink in np.linspace(0.0, T, grid):
        for level in np.linspace(0.0, 1.5 * q, grid):
            c = cost(kink, level)
            if c < best[0]:
                best = (c, kink, level)
    res = optimize.minimize(lambda z: cost(z[0], z[1]), [best[1], best[2]], method="Nelder-Mead",
                            options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 2000})
    if res.fun < best[0]:
        best = (float(res.fun), float(np.clip(res.x[0], 0, T)), float(max(res.x[1], 0.0)))
    return best[0], {"kink": best[1], "level": best[2]}
