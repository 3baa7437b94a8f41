"""Random driving sequences, scaled simulation and decay-rate estimates.

Every replica draws from its own counter-based stream keyed by
``(seed, replica, station, purpose)``, so results do not depend on the order
or the process in which replicas run.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FlowSolution, solve_counting
from .errors import ValidationError
from .network import NetworkPaths, RateModel, check_reachability, counting_network, spectral_radius
from .paths import sup_distance
from .ratefn import PoissonRate, RenewalRate, TabulatedRate, two_segment_value

PURPOSE_ARRIVAL = 0
PURPOSE_SERVICE = 1
PURPOSE_ROUTING = 2


def stream(seed: int, replica: int, station: int, purpose: int) -> np.random.Generator:
    """Independent generator for one replica, station and purpose."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica), int(station), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Distribution:
    """Inter-event time law: ``exponential`` (rate), ``deterministic`` (period) or
    ``tabulated`` (inverse CDF given at probabilities ``p`` with values ``x``)."""

    family: str
    params: dict

    def __post_init__(self):
        if self.family not in ("exponential", "deterministic", "tabulated"):
            raise ValidationError(f"unknown distribution family {self.family!r}", "distribution_family")
        if self.mean <= 0:
            raise ValidationError("inter-event times must have positive mean", "positive_mean")

    @property
    def mean(self) -> float:
        if self.family == "exponential":
            return 1.0 / float(self.params["rate"])
        if self.family == "deterministic":
            return float(self.params["period"])
        p = np.asarray(self.params["p"], dtype=float)
        x = np.asarray(self.params["x"], dtype=float)
        return float(np.trapezoid(x, p))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.family == "exponential":
            return rng.exponential(1.0 / float(self.params["rate"]), size)
        if self.family == "deterministic":
            return np.full(size, float(self.params["period"]))
        u = rng.random(size)
        return np.interp(u, self.params["p"], self.params["x"])

    def rate_function(self):
        """Rate function of the associated renewal counting process."""
        if self.family == "exponential":
            return PoissonRate(float(self.params["rate"]))
        if self.family == "deterministic":
            from .ratefn import DeterministicRate
            return DeterministicRate(float(self.params["period"]))
        raise ValidationError("no closed rate function for tabulated laws", "rate_family")

    def to_json(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_json(cls, obj) -> "Distribution | None":
        if obj is None:
            return None
        return cls(obj["family"], dict(obj.get("params", {})))


@dataclass(frozen=True)
class StochasticSpec:
    arrivals: tuple
    services: tuple
    R: np.ndarray
    seed: int = 0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        K = R.shape[0]
        if len(self.arrivals) != K or len(self.services) != K:
            raise ValidationError("one arrival and one service law per station", "dimension")
        if not spectral_radius(R) < 1:
            raise ValidationError("routing matrix must have spectral radius below one", "spectral_radius")
        exo = [i for i, a in enumerate(self.arrivals) if a is not None]
        if not check_reachability(R, exo):
            raise ValidationError("some station is unreachable from the exogenous set", "reachability")
        object.__setattr__(self, "R", R)

    @property
    def K(self) -> int:
        return self.R.shape[0]

    @property
    def exogenous_set(self) -> tuple:
        return tuple(i for i, a in enumerate(self.arrivals) if a is not None)

    def rate_model(self) -> RateModel:
        return RateModel([s.rate_function() for s in self.services],
                         [None if a is None else a.rate_function() for a in self.arrivals], self.R)

    def to_json(self) -> dict:
        return {"arrivals": [None if a is None else a.to_json() for a in self.arrivals],
                "services": [s.to_json() for s in self.services],
                "routing": self.R.tolist(), "seed": int(self.seed)}

    @classmethod
    def from_json(cls, obj: dict, seed: int | None = None) -> "StochasticSpec":
        return cls(tuple(Distribution.from_json(a) for a in obj["arrivals"]),
                   tuple(Distribution.from_json(s) for s in obj["services"]),
                   np.asarray(obj["routing"], dtype=float),
                   int(obj.get("seed", 0) if seed is None else seed))

    @classmethod
    def mm1(cls, lam: float, mu: float, seed: int = 0) -> "StochasticSpec":
        return cls((Distribution("exponential", {"rate": lam}),),
                   (Distribution("exponential", {"rate": mu}),), np.zeros((1, 1)), seed)


@dataclass(frozen=True)
class RareEvent:
    """``{Q_station(T) >= q}``."""

    station: int
    q: float
    T: float

    def __post_init__(self):
        if self.q < 0 or self.T <= 0:
            raise ValidationError("event needs q >= 0 and T > 0", "event")


def _event_times(dist: Distribution, rng: np.random.Generator, limit: float) -> np.ndarray:
    """Renewal epochs in ``(0, limit]`` (unscaled time)."""
    chunk = max(16, int(1.2 * limit / dist.mean) + 16)
    out, last = [], 0.0
    while True:
        c = last + np.cumsum(dist.sample(rng, chunk))
        out.append(c)
        last = float(c[-1])
        if last > limit:
            break
    t = np.concatenate(out)
    return t[t <= limit]


def _decisions(R: np.ndarray, i: int, rng: np.random.Generator, size: int) -> np.ndarray:
    K = R.shape[0]
    probs = np.append(R[i], max(1.0 - R[i].sum(), 0.0))
    probs = probs / probs.sum()
    return rng.choice(K + 1, size=size, p=probs).astype(np.int64)


def sample_raw(spec: StochasticSpec, n: int, T: float, replica: int = 0):
    """Unscaled arrival and tick epochs plus routing decisions for one replica."""
    if n < 1:
        raise ValidationError("scale n must be at least 1", "positive_n")
    K = spec.K
    arr, ticks, dec = [], [], []
    for i in range(K):
        a = spec.arrivals[i]
        arr.append(np.empty(0) if a is None else
                   _event_times(a, stream(spec.seed, replica, i, PURPOSE_ARRIVAL), n * T))
        ticks.append(_event_times(spec.services[i], stream(spec.seed, replica, i, PURPOSE_SERVICE), n * T))
        dec.append(_decisions(spec.R, i, stream(spec.seed, replica, i, PURPOSE_ROUTING), ticks[i].size + 1))
    return arr, ticks, dec


def sample_network(spec: StochasticSpec, n: int, T: float, replica: int = 0) -> tuple[NetworkPaths, tuple]:
    """Scaled counting network (time and counts divided by ``n``) with its decisions."""
    arr, ticks, dec = sample_raw(spec, n, T, replica)
    net = counting_network([t / n for t in ticks], [a / n for a in arr], dec, n, T)
    return net, net.decisions


def final_queue(arr, ticks, dec, K: int) -> np.ndarray:
    """Queue lengths after all events; same tie rule as the exact counting solver."""
    t_all = np.concatenate(arr + ticks)
    kind = np.concatenate([np.zeros(a.size, dtype=np.int8) for a in arr] +
                          [np.ones(s.size, dtype=np.int8) for s in ticks])
    st = np.concatenate([np.full(a.size, i) for i, a in enumerate(arr)] +
                        [np.full(s.size, i) for i, s in enumerate(ticks)])
    order = np.lexsort((st, kind, t_all))
    t_all, kind, st = t_all[order].tolist(), kind[order].tolist(), st[order].tolist()
    q = [0] * K
    ptr = [0] * K
    dec = [d.tolist() for d in dec]
    m = len(t_all)
    idx = 0
    if K == 1 and (not dec[0] or min(dec[0]) == 1):
        # single station without feedback: no decision bookkeeping needed
        qq = 0
        while idx < m:
            t = t_all[idx]
            ticks_now = 0
            while idx < m and t_all[idx] == t:
                if kind[idx] == 0:
                    qq += 1
                else:
                    ticks_now += 1
                idx += 1
            qq -= min(qq, ticks_now)
        return np.array([qq])
    while idx < m:
        t = t_all[idx]
        ticks_now = [0] * K
        while idx < m and t_all[idx] == t:
            if kind[idx] == 0:
                q[st[idx]] += 1
            else:
                ticks_now[st[idx]] += 1
            idx += 1
        busy = True
        while busy:
            busy = False
            for i in range(K):
                while ticks_now[i] > 0 and q[i] > 0:
                    j = dec[i][ptr[i]]
                    ptr[i] += 1
                    ticks_now[i] -= 1
                    q[i] -= 1
                    busy = True
                    if j < K:
                        q[j] += 1
    return np.array(q)


def _event_hits(args) -> list[int]:
    spec_json, n, event, lo, hi = args
    spec = StochasticSpec.from_json(spec_json)
    out = []
    for r in range(lo, hi):
        arr, ticks, dec = sample_raw(spec, n, event.T, r)
        q = final_queue(arr, ticks, dec, spec.K)
        out.append(int(q[event.station] >= event.q * n - 1e-9))
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LDQ_THREADS", "1")))
    except ValueError:
        return 1


def count_hits(spec: StochasticSpec, event: RareEvent, n: int, replicas: int) -> int:
    threads = _threads()
    if threads == 1:
        return int(sum(_event_hits((spec.to_json(), n, event, 0, replicas))))
    chunk = math.ceil(replicas / threads)
    jobs = [(spec.to_json(), n, event, lo, min(replicas, lo + chunk)) for lo in range(0, replicas, chunk)]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return int(sum(sum(h) for h in ex.map(_event_hits, jobs)))


@dataclass
class DecayRow:
    n: int
    replicas: int
    hits: int
    p_hat: float
    decay: float
    stderr: float
    lower_bound_only: bool

    def to_json(self) -> dict:
        return {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
                for k, v in self.__dict__.items()}


@dataclass
class DecayTable:
    rows: list
    variational: float
    kink: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rows": [r.to_json() for r in self.rows], "variational": self.variational,
                "variational_path": self.kink, "warnings": self.warnings}


def estimate_decay(spec: StochasticSpec, event: RareEvent, scales, replicas: int) -> DecayTable:
    """Crude Monte Carlo estimate of ``-log P(event) / n`` per scale, with the two-segment value."""
    if replicas < 1000:
        raise ValidationError("at least 1000 replicas per scale", "replicas")
    rows, warns = [], []
    for n in scales:
        if event.q == 0:
            hits = replicas
        else:
            hits = count_hits(spec, event, int(n), replicas)
        p = hits / replicas
        se = math.sqrt(p * (1 - p) / replicas)
        if hits == 0:
            # rule-of-three bound: p < 3 / replicas with 95% confidence
            decay = -math.log(3.0 / replicas) / n
            lb = True
            warns.append(f"no hits at n={n}; decay reported as a lower bound")
        else:
            decay = -math.log(p) / n
            lb = False
            if hits < 10:
                warns.append(f"only {hits} hits at n={n}")
        rows.append(DecayRow(int(n), replicas, hits, p, decay, se, lb))
    if spec.K == 1:
        J, path = two_segment_value(spec.rate_model(), event.station, event.q, event.T)
    else:
        J, path = float("nan"), {}
    for w in warns:
        warnings.warn(w, stacklevel=2)
    return DecayTable(rows, J, path, warns)


# ---------------------------------------------------------------------------
# one-station counterexample

def counterexample_sequences(n: int, x: float, alpha: float, horizon: float = 3.0):
    """Arrival epochs, service epochs and both decision sequences (scaled by ``n``).

    Decisions use ``0`` for a return to the station and ``1`` for exit.
    Inter-arrival times repeat ``n`` ones followed by one ``n``; service
    times are all ``alpha``.  The first routing sequence alternates ``n+1``
    exits and ``n+1`` returns; the second swaps the decisions at positions
    ``floor(x n) + 1`` of every block.
    """
    if n < 10:
        raise ValidationError("n must be at least 10", "n_range")
    if not 0 < x < 1 or not 0 < alpha < 1:
        raise ValidationError("x and alpha must lie in (0, 1)", "parameter_range")
    limit = horizon * n
    gaps = np.tile(np.append(np.ones(n), float(n)), int(np.ceil(limit / (2 * n))) + 2)
    arrivals = np.cumsum(gaps)
    arrivals = arrivals[arrivals <= limit]
    m = int(np.floor(limit / alpha)) + 1
    ticks = alpha * np.arange(1, m + 1)
    ticks = ticks[ticks <= limit]
    need = ticks.size + 2 * (n + 1)
    blocks = int(np.ceil(need / (2 * (n + 1)))) + 1
    base = np.tile(np.concatenate([np.ones(n + 1, dtype=np.int64), np.zeros(n + 1, dtype=np.int64)]), blocks)
    k = int(np.floor(x * n))
    swapped = base.copy()
    period = 2 * (n + 1)
    for b in range(blocks):
        swapped[b * period + k] = 1 - swapped[b * period + k]
        swapped[b * period + n + 1 + k] = 1 - swapped[b * period + n + 1 + k]
    return arrivals / n, ticks / n, base, swapped


@dataclass
class CounterexampleResult:
    n: int
    x: float
    alpha: float
    net1: NetworkPaths
    net2: NetworkPaths
    sol1: FlowSolution
    sol2: FlowSolution
    net_gap: float
    gap: float
    case1_gap: float

    def summary(self) -> dict:
        return {"n": self.n, "x": self.x, "alpha": self.alpha, "net_gap": self.net_gap,
                "gap": self.gap, "case1_departure_vs_arrival": self.case1_gap}


def counterexample(n: int, x: float, alpha: float, horizon: float = 3.0) -> CounterexampleResult:
    """Solve both networks exactly; report the distance of the triples and of the flows."""
    arr, ticks, d1, d2 = counterexample_sequences(n, x, alpha, horizon)
    net1 = counting_network([ticks], [arr], [d1], n, horizon)
    net2 = counting_network([ticks], [arr], [d2], n, horizon)
    sol1 = solve_counting(net1)
    sol2 = solve_counting(net2)
    ranges = float(max(sol1.D[0].eval(horizon), sol2.D[0].eval(horizon)))
    net_gap = max(sup_distance(net1.S, net2.S, horizon), sup_distance(net1.N, net2.N, horizon),
                  max(sup_distance(net1.P.entries[0][0], net2.P.entries[0][0], ranges), 0.0))
    gap = max(sup_distance(sol1.A, sol2.A, horizon), sup_distance(sol1.D, sol2.D, horizon))
    case1 = sup_distance(sol1.D[0], net1.N[0], 1.0)
    return CounterexampleResult(n, x, alpha, net1, net2, sol1, sol2, net_gap, gap, case1)
