"""Network model types and the matrix conditions on the routing matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, NumericError, ValidationError
from .paths import (PiecewisePath, RoutingPath, StepPath, VectorPath, path_from_json,
                    vector_from_json)
from .ratefn import INF, PointRate, RateFunction, rate_from_json


def _square(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError("matrix must be square", "square")
    return M


def _power_radius(M: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Perron root of an irreducible nonnegative block.

    Iterates on ``M + I`` (primitive, same Perron vector) and stops when the
    Collatz-Wielandt lower and upper bounds meet.
    """
    n = M.shape[0]
    B = M + np.eye(n)
    x = np.ones(n) / n
    lo, hi = 0.0, INF
    for _ in range(max_iter):
        y = B @ x
        ratios = y / x
        lo, hi = float(ratios.min()), float(ratios.max())
        if hi - lo <= tol * max(1.0, hi):
            break
        x = y / y.sum()
    else:
        if hi - lo > 1e-9:
            raise NumericError("power iteration did not converge", gap=hi - lo)
    return 0.5 * (lo + hi) - 1.0


def spectral_radius(M) -> float:
    """Spectral radius of a nonnegative matrix, maximized over its strong components."""
    M = _square(M)
    if np.any(M < 0):
        raise ValidationError("matrix must be nonnegative", "nonnegative")
    n = M.shape[0]
    if n == 0 or not np.any(M):
        return 0.0
    # Gershgorin: rho <= max row sum, and a zero bound settles it
    if np.max(M.sum(axis=1)) == 0:
        return 0.0
    ncomp, labels = connected_components(M > 0, directed=True, connection="strong")
    best = 0.0
    for c in range(ncomp):
        idx = np.nonzero(labels == c)[0]
        block = M[np.ix_(idx, idx)]
        if idx.size == 1:
            best = max(best, float(block[0, 0]))
        else:
            best = max(best, _power_radius(block))
    return max(best, 0.0)


def indicator(exogenous_set: Sequence[int], K: int) -> np.ndarray:
    e = np.zeros(K)
    e[list(exogenous_set)] = 1.0
    return e


def check_reachability(R, exogenous_set: Sequence[int]) -> bool:
    """Every station is reached from an exogenous station within ``K`` routing steps."""
    R = _square(R)
    K = R.shape[0]
    v = indicator(exogenous_set, K)
    total = v.copy()
    for _ in range(K):
        v = v @ R
        total += v
    return bool(np.all(total > 0))


def mix_with_R(P, R, eps) -> np.ndarray:
    """Row-wise convex combination ``(1 - eps_i) P_i + eps_i R_i``; asserts radius below one."""
    P, R = _square(P), _square(R)
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (R.shape[0],))
    if P.shape != R.shape:
        raise ValidationError("P and R must have equal shape", "dimension")
    if np.any(eps <= 0) or np.any(eps > 1):
        raise ValidationError("mixing weights must lie in (0, 1]", "eps_range")
    if np.any((P > 0) & (R <= 0)):
        raise ValidationError("support of P must lie in the support of R", "support")
    if np.any(P.sum(axis=1) > 1 + 1e-12) or np.any(P < 0):
        raise ValidationError("P must be substochastic", "substochastic")
    M = (1.0 - eps)[:, None] * P + eps[:, None] * R
    rho = spectral_radius(M)
    if not rho < 1:
        raise NumericError(f"mixed matrix has spectral radius {rho} >= 1", gap=rho - 1)
    return M


def eta_of_delta(delta, R) -> np.ndarray:
    """Solve ``eta = delta + R^T eta``; all coordinates must come out positive."""
    R = _square(R)
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (R.shape[0],) or np.any(delta < 0):
        raise ValidationError("delta must be a nonnegative vector of length K", "delta")
    if not spectral_radius(R) < 1:
        raise ValidationError("routing matrix must have spectral radius below one", "spectral_radius")
    try:
        eta = np.linalg.solve(np.eye(R.shape[0]) - R.T, delta)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular system for eta: {exc}") from None
    if np.any(eta <= 0):
        raise ValidationError("eta has a nonpositive coordinate; some station is unreachable",
                              "reachability")
    return eta


@dataclass(frozen=True)
class RoutingMatrix:
    """Substochastic routing matrix; ``validated`` additionally means radius below one."""

    entries: np.ndarray
    validated: bool = False

    def __post_init__(self):
        M = _square(self.entries)
        if np.any(M < 0) or np.any(M.sum(axis=1) > 1 + 1e-12):
            raise ValidationError("routing matrix must be substochastic", "substochastic")
        if self.validated and not spectral_radius(M) < 1:
            raise ValidationError("routing matrix must have spectral radius below one", "spectral_radius")
        M = M.copy()
        M.setflags(write=False)
        object.__setattr__(self, "entries", M)

    @classmethod
    def validate(cls, M) -> "RoutingMatrix":
        return cls(np.asarray(M, dtype=float), validated=True)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


@dataclass
class NetworkPaths:
    """Service, routing and exogenous-arrival paths of a network."""

    S: VectorPath
    P: RoutingPath
    N: VectorPath
    exogenous_set: tuple = ()
    decisions: tuple | None = None

    def __post_init__(self):
        self.S = self.S if isinstance(self.S, VectorPath) else VectorPath(self.S)
        self.N = self.N if isinstance(self.N, VectorPath) else VectorPath(self.N)
        K = len(self.S)
        if len(self.N) != K or self.P.K != K:
            raise ValidationError("S, P and N must share the dimension K", "dimension")
        for i, s in enumerate(self.S):
            if abs(s.v[0]) > 1e-12:
                raise ValidationError(f"service path {i} must start at 0", "service_starts_at_zero")
            if not s.is_nondecreasing():
                raise ValidationError(f"service path {i} must be nondecreasing", "nondecreasing")
        self.exogenous_set = tuple(sorted(int(i) for i in self.exogenous_set))
        for i, p in enumerate(self.N):
            if not p.is_nondecreasing():
                raise ValidationError(f"arrival path {i} must be nondecreasing", "nondecreasing")
            if i not in self.exogenous_set and p.t.size > 1:
                if np.any(np.abs(p.v - p.v[0]) > 1e-12) or p.tail_slope != 0:
                    raise ValidationError(f"station {i} has no exogenous arrivals but N varies",
                                          "exogenous_pattern")

    @property
    def K(self) -> int:
        return len(self.S)

    @property
    def is_counting(self) -> bool:
        return self.S.kind == "step" and self.N.kind == "step" and self.P.decisions is not None

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "S": self.S.to_json(),
            "N": self.N.to_json(),
            "P": self.P.to_json(),
            "exogenous_set": list(self.exogenous_set),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkPaths":
        try:
            K = int(obj["K"])
            S = vector_from_json(obj["S"])
            N = vector_from_json(obj["N"])
            if "routing_matrix" in obj:
                P = RoutingPath.linear(obj["routing_matrix"], float(obj.get("routing_horizon", 1e3)))
            else:
                P = RoutingPath([[path_from_json(e) for e in row] for row in obj["P"]])
            exo = obj.get("exogenous_set")
        except KeyError as exc:
            raise ConfigError(f"network paths JSON lacks {exc}") from None
        if exo is None:
            exo = [i for i in range(K) if N[i].t.size > 1 and N[i].v[-1] > N[i].v[0]]
        net = cls(S, P, N, tuple(exo))
        if net.K != K:
            raise ValidationError("declared K disagrees with the paths", "dimension")
        return net


@dataclass
class RateModel:
    """Per-station rate functions plus the nominal routing matrix.

    ``exogenous[i]`` is ``None`` for stations without exogenous arrivals.
    ``initial`` charges the initial condition ``N(0)`` per station and
    defaults to the indicator of 0.
    """

    service: list
    exogenous: list
    R: np.ndarray
    initial: RateFunction = field(default_factory=PointRate)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.R = np.array(RoutingMatrix.validate(self.R).entries)
        K = self.R.shape[0]
        if len(self.service) != K or len(self.exogenous) != K:
            raise ValidationError("rate model lists must have length K", "dimension")
        for i, f in enumerate(self.service):
            if not f.domain_right_open:
                self.flags.append(f"service rate of station {i} has a domain closed on the right")
        if not any(e is not None for e in self.exogenous):
            raise ValidationError("at least one station needs exogenous arrivals", "exogenous_set")
        if not check_reachability(self.R, self.exogenous_set):
            raise ValidationError("some station is unreachable from the exogenous set", "reachability")

    @property
    def K(self) -> int:
        return self.R.shape[0]

    @property
    def exogenous_set(self) -> tuple:
        return tuple(i for i, e in enumerate(self.exogenous) if e is not None)

    @property
    def mu(self) -> np.ndarray:
        return np.array([f.minimizer for f in self.service])

    @property
    def lam(self) -> np.ndarray:
        return np.array([0.0 if e is None else e.minimizer for e in self.exogenous])

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "stations": [{"service": s.to_json(), "exogenous": None if e is None else e.to_json()}
                         for s, e in zip(self.service, self.exogenous)],
            "routing": self.R.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RateModel":
        try:
            K = int(obj["K"])
            stations = obj["stations"]
            R = obj["routing"]
        except KeyError as exc:
            raise ConfigError(f"network config lacks {exc}") from None
        if len(stations) != K:
            raise ValidationError("number of stations differs from K", "dimension")
        service = [rate_from_json(s["service"]) for s in stations]
        exo = [None if s.get("exogenous") is None else rate_from_json(s["exogenous"]) for s in stations]
        return cls(service, exo, np.asarray(R, dtype=float))


def load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"input file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def fluid_network(lam, mu, R, horizon: float, routing_horizon: float | None = None) -> NetworkPaths:
    """Linear network ``S = mu t``, ``N = lam t``, ``P(u) = R u``."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    K = lam.size
    uh = routing_horizon if routing_horizon is not None else max(horizon * (1 + float(np.max(mu))), horizon)
    S = VectorPath([PiecewisePath([0.0, horizon], [0.0, mu[i] * horizon], mu[i]) for i in range(K)])
    N = VectorPath([PiecewisePath([0.0, horizon], [0.0, lam[i] * horizon], lam[i]) for i in range(K)])
    return NetworkPaths(S, RoutingPath.linear(R, uh), N, tuple(i for i in range(K) if lam[i] > 0))


def counting_network(service_times: Sequence, arrival_times: Sequence, decisions: Sequence,
                     n: int, horizon: float) -> NetworkPaths:
    """Scaled counting network from event times (already divided by ``n``)."""
    K = len(service_times)
    S = VectorPath([StepPath(service_times[i], None, 0.0, horizon, n=n) for i in range(K)])
    N = VectorPath([StepPath(arrival_times[i], None, 0.0, horizon, n=n) for i in range(K)])
    P = RoutingPath.from_decisions(decisions, n)
    exo = tuple(i for i in range(K) if len(arrival_times[i]) > 0)
    return NetworkPaths(S, P, N, exo, tuple(np.asarray(d, dtype=np.int64) for d in decisions))
