"""Step and piecewise-linear paths on a finite horizon.

All paths share one representation: knots ``t[0] = 0 < ... < t[-1] = horizon``
with right values ``v`` and left limits ``vl`` at each knot.  Between two knots
the path is linear from ``v[k]`` to ``vl[k + 1]``, and past the horizon it
continues with a constant ``tail_slope``.  A step path has zero slopes; a
piecewise path has no jumps.  Sums, pointwise minima, running minima and
compositions are closed over this representation and are computed exactly up
to floating point, which is what makes the reflection and fixed-point maps
exact on these classes.
"""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

DEDUP_TOL = 1e-12


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


class Path:
    """Right-continuous piecewise-linear path, possibly with jumps and signed."""

    __slots__ = ("t", "v", "vl", "tail_slope", "slopes")

    def __init__(self, t, v, vl=None, tail_slope: float = 0.0):
        t = np.asarray(t, dtype=float)
        v = np.asarray(v, dtype=float)
        vl = v.copy() if vl is None else np.array(vl, dtype=float)
        if t.ndim != 1 or t.size == 0 or v.shape != t.shape or vl.shape != t.shape:
            raise ValidationError("knots and values must be 1-d arrays of equal length", "shape")
        if t[0] != 0.0:
            raise ValidationError("paths start at time 0", "start_at_zero")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("knot times must be strictly increasing", "increasing_knots")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(vl)) and np.isfinite(tail_slope)):
            raise ValidationError("path values must be finite", "finite")
        vl[0] = v[0]
        self.t = _frozen(t)
        self.v = _frozen(v)
        self.vl = _frozen(vl)
        self.tail_slope = float(tail_slope)
        self.slopes = _frozen((vl[1:] - v[:-1]) / np.diff(t))

    # -- basic queries -------------------------------------------------
    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    @property
    def has_jumps(self) -> bool:
        return bool(np.any(self.v != self.vl))

    def jumps(self) -> tuple[np.ndarray, np.ndarray]:
        """Times and sizes of the jumps."""
        idx = np.nonzero(self.v != self.vl)[0]
        return self.t[idx].copy(), (self.v - self.vl)[idx]

    def is_nondecreasing(self, tol: float = 1e-12) -> bool:
        scale = tol * max(1.0, float(np.max(np.abs(self.v))))
        return bool(
            np.all(self.vl[1:] - self.v[:-1] >= -scale)
            and np.all(self.v - self.vl >= -scale)
            and self.tail_slope >= -tol
        )

    def _ext_slopes(self) -> np.ndarray:
        return np.append(self.slopes, self.tail_slope)

    def eval(self, x):
        """Value at ``x`` (right-continuous)."""
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0):
            raise ValidationError("paths are evaluated at nonnegative times", "nonnegative_time")
        k = np.searchsorted(self.t, xa, side="right") - 1
        out = self.v[k] + (xa - self.t[k]) * self._ext_slopes()[k]
        return float(out) if out.ndim == 0 else out

    __call__ = eval

    def eval_left(self, x):
        """Left limit at ``x``; equals the value at 0 for ``x = 0``."""
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        if np.any(xa < 0):
            raise ValidationError("paths are evaluated at nonnegative times", "nonnegative_time")
        j = np.searchsorted(self.t, xa, side="left")
        at_knot = (j < self.t.size) & (self.t[np.minimum(j, self.t.size - 1)] == xa)
        prev = np.maximum(j - 1, 0)
        out = self.v[prev] + (xa - self.t[prev]) * self._ext_slopes()[prev]
        out = np.where(at_knot, self.vl[np.minimum(j, self.t.size - 1)], out)
        out = np.where(xa == 0.0, self.v[0], out)
        return float(out[0]) if np.ndim(x) == 0 else out

    def slope_at(self, x: float) -> float:
        """Right derivative at ``x``."""
        k = int(np.searchsorted(self.t, x, side="right") - 1)
        return float(self._ext_slopes()[k])

    def next_knot(self, x: float, tol: float = DEDUP_TOL) -> float:
        """First knot strictly after ``x + tol``; ``inf`` past the horizon."""
        k = int(np.searchsorted(self.t, x + tol, side="right"))
        return float(self.t[k]) if k < self.t.size else np.inf

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return combine(self, other, 1.0)

    def __sub__(self, other):
        return combine(self, other, -1.0)

    def __neg__(self):
        return _wrap(self.t, -self.v, -self.vl, -self.tail_slope, prefer_step=False)

    def scaled(self, c: float) -> "Path":
        return _wrap(self.t, c * self.v, c * self.vl, c * self.tail_slope,
                     prefer_step=isinstance(self, StepPath))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(knots={self.t.size}, horizon={self.horizon:g})"

    def to_json(self) -> dict:
        return {
            "kind": "path",
            "knots": [[float(a), float(b), float(c)] for a, b, c in zip(self.t, self.vl, self.v)],
            "horizon": self.horizon,
            "tail_slope": self.tail_slope,
        }


class StepPath(Path):
    """Nondecreasing right-continuous step path.

    Counting paths scaled by ``1/n`` are built with ``n`` set; their values are
    then ``counts / n`` with integer ``counts`` kept alongside for exact
    comparisons.
    """

    __slots__ = ("n", "counts")

    def __init__(self, times=(), increments=None, initial: float = 0.0,
                 horizon: float | None = None, n: int | None = None):
        times = np.asarray(times, dtype=float)
        if times.size and (np.any(times < 0) or np.any(np.diff(times) < 0)):
            raise ValidationError("jump times must be nonnegative and ordered", "increasing_jumps")
        if n is not None:
            if increments is not None:
                inc_counts = np.asarray(increments, dtype=np.int64)
            else:
                inc_counts = np.ones(times.size, dtype=np.int64)
            init_count = int(round(initial * n)) if initial else 0
        else:
            inc = np.ones(times.size) if increments is None else np.asarray(increments, dtype=float)
        if n is not None:
            if np.any(inc_counts <= 0):
                raise ValidationError("step increments must be positive", "positive_increments")
        elif inc.shape != times.shape or np.any(inc <= 0):
            raise ValidationError("step increments must be positive", "positive_increments")
        # merge repeated times; a jump at 0 is part of the initial value
        uniq, inv = np.unique(times, return_inverse=True)
        if n is not None:
            agg = np.zeros(uniq.size, dtype=np.int64)
            np.add.at(agg, inv, inc_counts)
        else:
            agg = np.zeros(uniq.size)
            np.add.at(agg, inv, inc)
        if uniq.size and uniq[0] == 0.0:
            init_count_or_val = agg[0]
            agg, uniq = agg[1:], uniq[1:]
        else:
            init_count_or_val = 0
        last = float(uniq[-1]) if uniq.size else 0.0
        T = last if horizon is None else float(horizon)
        if T < last:
            raise ValidationError("horizon precedes the last jump", "horizon")
        knots = np.concatenate([[0.0], uniq])
        if T > knots[-1] or knots.size == 1 and T > 0:
            knots = np.append(knots, T)
            agg = np.append(agg, 0)
        if n is not None:
            c0 = init_count + int(init_count_or_val)
            counts = c0 + np.concatenate([[0], np.cumsum(agg)]).astype(np.int64)
            vals = counts / n
            self.n = int(n)
            self.counts = counts
            self.counts.setflags(write=False)
        else:
            vals = initial + init_count_or_val + np.concatenate([[0.0], np.cumsum(agg)])
            self.n = None
            self.counts = None
        left = np.concatenate([[vals[0]], vals[:-1]])
        super().__init__(knots, vals, left, 0.0)

    @classmethod
    def _from_arrays(cls, t, v, vl):
        obj = cls.__new__(cls)
        Path.__init__(obj, t, v, vl, 0.0)
        obj.n = None
        obj.counts = None
        return obj

    @property
    def initial_value(self) -> float:
        return float(self.v[0])

    def to_json(self) -> dict:
        jt, js = self.jumps()
        out = {
            "kind": "step",
            "jumps": [[float(a), float(b)] for a, b in zip(jt, js)],
            "initial_value": self.initial_value,
            "horizon": self.horizon,
            "tail_slope": 0.0,
        }
        if self.n is not None:
            out["n"] = self.n
        return out


class PiecewisePath(Path):
    """Continuous nondecreasing piecewise-linear path.

    The tail slope defaults to the slope of the last segment.
    """

    __slots__ = ()

    def __init__(self, times, values, tail_slope: float | None = None, *, check: bool = True):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if tail_slope is None:
            tail_slope = float((values[-1] - values[-2]) / (times[-1] - times[-2])) if times.size > 1 else 0.0
        super().__init__(times, values, None, tail_slope)
        if check and not self.is_nondecreasing():
            raise ValidationError("piecewise path must be nondecreasing", "nondecreasing")

    @classmethod
    def _from_arrays(cls, t, v, tail):
        obj = cls.__new__(cls)
        Path.__init__(obj, t, v, None, tail)
        return obj

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.t, self.v)]

    def to_json(self) -> dict:
        return {
            "kind": "piecewise",
            "breakpoints": [[float(a), float(b)] for a, b in zip(self.t, self.v)],
            "horizon": self.horizon,
            "tail_slope": self.tail_slope,
        }


def linear_path(slope: float, horizon: float, intercept: float = 0.0) -> PiecewisePath:
    """The path ``intercept + slope * t`` on ``[0, horizon]``."""
    return PiecewisePath([0.0, horizon], [intercept, intercept + slope * horizon], slope)


def constant_path(value: float, horizon: float) -> PiecewisePath:
    return PiecewisePath([0.0, horizon], [value, value], 0.0)


def _wrap(t, v, vl, tail, prefer_step: bool) -> Path:
    """Pick the most specific class for freshly computed arrays."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    vl = np.asarray(vl, dtype=float)
    jumps = bool(np.any(v[1:] != vl[1:]))
    p = Path(t, v, vl, tail)
    scale = 1e-12 * max(1.0, float(np.max(np.abs(v))))
    mono = bool(np.all(vl[1:] - v[:-1] >= -scale) and np.all(v - vl >= -scale) and tail >= -1e-12)
    if not mono:
        return p
    flat = bool(np.all(np.abs(vl[1:] - v[:-1]) <= 0.0)) and tail == 0.0
    if flat and (jumps or prefer_step):
        return StepPath._from_arrays(t, v, vl)
    if not jumps:
        return PiecewisePath._from_arrays(t, v, tail)
    return p


def _all_continuous(paths: Iterable[Path]) -> bool:
    return all(not p.has_jumps for p in paths)


def merge_knots(paths: Sequence[Path], upto: float | None = None, dedup: bool | None = None) -> np.ndarray:
    """Union of knot times; near-duplicates are dropped only for continuous paths."""
    ts = np.unique(np.concatenate([p.t for p in paths]))
    if upto is not None:
        ts = ts[ts <= upto]
        if ts[-1] < upto:
            ts = np.append(ts, upto)
    if dedup is None:
        dedup = _all_continuous(paths)
    if dedup and ts.size > 2:
        keep = np.ones(ts.size, dtype=bool)
        keep[1:] = np.diff(ts) > DEDUP_TOL * np.maximum(1.0, ts[1:])
        end = ts[-1]
        ts = ts[keep]
        ts[-1] = max(ts[-1], end)
    return ts


def combine(a: Path, b: Path, sign: float = 1.0) -> Path:
    """``a + sign * b`` on the merged knot grid."""
    t = merge_knots([a, b])
    v = a.eval(t) + sign * b.eval(t)
    vl = a.eval_left(t) + sign * b.eval_left(t)
    return _wrap(t, v, vl, a.tail_slope + sign * b.tail_slope,
                 prefer_step=isinstance(a, StepPath) and isinstance(b, StepPath))


def add_many(paths: Sequence[Path]) -> Path:
    t = merge_knots(paths)
    v = sum(p.eval(t) for p in paths)
    vl = sum(p.eval_left(t) for p in paths)
    tail = sum(p.tail_slope for p in paths)
    return _wrap(t, v, vl, tail, prefer_step=all(isinstance(p, StepPath) for p in paths))


def _insert_knots(t: np.ndarray, extra: np.ndarray) -> np.ndarray:
    if extra.size == 0:
        return t
    return np.unique(np.concatenate([t, extra]))


def minimum(a: Path, b: Path) -> Path:
    """Pointwise minimum, with knots added where the two paths cross."""
    t = merge_knots([a, b])
    da_r = a.eval(t) - b.eval(t)
    da_l = a.eval_left(t) - b.eval_left(t)
    s0, s1 = da_r[:-1], da_l[1:]
    cross = (s0 * s1) < 0
    frac = np.where(cross, s0 / np.where(cross, s0 - s1, 1.0), 0.0)
    tc = t[:-1] + frac * np.diff(t)
    ok = cross & (tc > t[:-1] + DEDUP_TOL) & (tc < t[1:] - DEDUP_TOL)
    t2 = _insert_knots(t, tc[ok])
    v = np.minimum(a.eval(t2), b.eval(t2))
    vl = np.minimum(a.eval_left(t2), b.eval_left(t2))
    ea, eb = a.eval(t2[-1]), b.eval(t2[-1])
    if ea < eb:
        tail = a.tail_slope
    elif eb < ea:
        tail = b.tail_slope
    else:
        tail = min(a.tail_slope, b.tail_slope)
    return _wrap(t2, v, vl, tail, prefer_step=isinstance(a, StepPath) and isinstance(b, StepPath))


def clip_above(a: Path, c: float = 0.0) -> Path:
    """Pointwise ``min(a, c)``."""
    return minimum(a, constant_path(c, a.horizon))


def running_min(x: Path) -> Path:
    """``M(t) = inf_{s <= t} x(s)``, left limits included."""
    t, v, vl = x.t, x.v, x.vl
    m = t.size
    pts = np.empty(2 * m - 1)
    pts[0] = v[0]
    pts[1::2] = vl[1:]
    pts[2::2] = v[1:]
    cm = np.minimum.accumulate(pts)
    mr = np.empty(m)
    ml = np.empty(m)
    mr[0] = ml[0] = cm[0]
    ml[1:] = cm[1::2]
    mr[1:] = cm[2::2]
    # segments where x dips below the running minimum strictly inside
    a, b, m0 = v[:-1], vl[1:], mr[:-1]
    dips = (b < m0) & (a > m0)
    frac = np.where(dips, (a - m0) / np.where(dips, a - b, 1.0), 0.0)
    tc = t[:-1] + frac * np.diff(t)
    ok = dips & (tc > t[:-1] + DEDUP_TOL) & (tc < t[1:] - DEDUP_TOL)
    if np.any(ok):
        idx = np.nonzero(ok)[0]
        t2 = np.concatenate([t, tc[idx]])
        r2 = np.concatenate([mr, m0[idx]])
        l2 = np.concatenate([ml, m0[idx]])
        order = np.argsort(t2, kind="stable")
        t2, r2, l2 = t2[order], r2[order], l2[order]
    else:
        t2, r2, l2 = t, mr, ml
    tail = x.tail_slope if (x.tail_slope < 0 and v[-1] <= mr[-1]) else 0.0
    return _wrap(t2, r2, l2, tail, prefer_step=isinstance(x, StepPath))


def compose(p: Path, d: Path) -> Path:
    """``t -> p(d(t))`` for nondecreasing ``d``."""
    if not d.is_nondecreasing():
        raise ValidationError("composition needs a nondecreasing inner path", "nondecreasing")
    t, dv, dvl = d.t, d.v, d.vl
    pt = p.t
    a, b = dv[:-1], dvl[1:]
    rising = b > a
    lo = np.searchsorted(pt, a, side="right")
    hi = np.searchsorted(pt, b, side="left")
    cnt = np.where(rising, np.maximum(hi - lo, 0), 0)
    total = int(cnt.sum())
    if total:
        seg = np.repeat(np.arange(a.size), cnt)
        offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        u = pt[lo[seg] + offs]
        tc = t[seg] + (u - a[seg]) / (b[seg] - a[seg]) * np.diff(t)[seg]
        inside = (tc > t[seg]) & (tc < t[seg + 1])
        tc, u = tc[inside], u[inside]
    else:
        tc = u = np.empty(0)
    right_d = p.eval(dv)
    prev_rising = np.concatenate([[False], rising])
    left_d = np.where(prev_rising, p.eval_left(dvl), p.eval(dvl))
    left_d[0] = right_d[0]
    t_all = np.concatenate([t, tc])
    r_all = np.concatenate([right_d, np.atleast_1d(p.eval(u)) if u.size else np.empty(0)])
    l_all = np.concatenate([left_d, np.atleast_1d(p.eval_left(u)) if u.size else np.empty(0)])
    order = np.argsort(t_all, kind="stable")
    t_all, r_all, l_all = t_all[order], r_all[order], l_all[order]
    keep = np.ones(t_all.size, dtype=bool)
    keep[1:] = np.diff(t_all) > 0
    tail = p.slope_at(float(dv[-1])) * d.tail_slope if d.tail_slope else 0.0
    return _wrap(t_all[keep], r_all[keep], l_all[keep], tail,
                 prefer_step=isinstance(p, StepPath) and isinstance(d, StepPath))


def shift(x: Path, u: float) -> Path:
    """``t -> x(t + u)``."""
    if u < 0:
        raise ValidationError("shift must be nonnegative", "nonnegative_shift")
    if u == 0:
        return x
    inner = x.t[x.t > u] - u
    t = np.concatenate([[0.0], inner])
    v = np.concatenate([[x.eval(u)], x.v[x.t > u]])
    vl = np.concatenate([[x.eval(u)], x.vl[x.t > u]])
    return _wrap(t, v, vl, x.tail_slope, prefer_step=isinstance(x, StepPath))


def simplify(x: Path, tol: float = 1e-12) -> Path:
    """Drop interior knots where the path is continuous and collinear."""
    if x.t.size <= 2:
        return x
    s = x.slopes
    cont = np.abs(x.v[1:-1] - x.vl[1:-1]) <= 0.0
    same = np.abs(s[1:] - s[:-1]) <= tol * np.maximum(1.0, np.maximum(np.abs(s[1:]), np.abs(s[:-1])))
    drop = cont & same
    if not np.any(drop):
        return x
    keep = np.concatenate([[True], ~drop, [True]])
    return _wrap(x.t[keep], x.v[keep], x.vl[keep], x.tail_slope,
                 prefer_step=isinstance(x, StepPath))


def restrict(x: Path, T: float) -> Path:
    """Knots truncated at ``T`` (the tail then follows the last segment)."""
    if T >= x.horizon:
        return x
    keep = x.t < T
    t = np.append(x.t[keep], T)
    v = np.append(x.v[keep], x.eval_left(T))
    vl = np.append(x.vl[keep], x.eval_left(T))
    k = int(np.sum(keep)) - 1
    return _wrap(t, v, vl, float(x._ext_slopes()[k]), prefer_step=isinstance(x, StepPath))


# ---------------------------------------------------------------------------
# vectors of paths

class VectorPath:
    """K paths of one kind (step or piecewise), e.g. arrivals per station."""

    __slots__ = ("components",)

    def __init__(self, components: Sequence[Path]):
        comps = tuple(components)
        if not comps:
            raise ValidationError("a vector path needs at least one component", "nonempty")
        kinds = {type(c) for c in comps}
        if StepPath in kinds and PiecewisePath in kinds:
            raise ValidationError("vector components must share their kind", "homogeneous_kind")
        self.components = comps

    def __len__(self) -> int:
        return len(self.components)

    def __getitem__(self, i: int) -> Path:
        return self.components[i]

    def __iter__(self):
        return iter(self.components)

    @property
    def kind(self) -> str:
        kinds = {type(c) for c in self.components}
        if kinds == {StepPath}:
            return "step"
        if kinds == {PiecewisePath}:
            return "piecewise"
        return "path"

    @property
    def horizon(self) -> float:
        return min(c.horizon for c in self.components)

    def eval(self, x) -> np.ndarray:
        return np.array([c.eval(x) for c in self.components])

    __call__ = eval

    def eval_left(self, x) -> np.ndarray:
        return np.array([c.eval_left(x) for c in self.components])

    def knots(self) -> np.ndarray:
        return merge_knots(self.components)

    def __add__(self, other: "VectorPath") -> "VectorPath":
        _check_dims(self, other)
        return VectorPath([a + b for a, b in zip(self, other)])

    def __sub__(self, other: "VectorPath") -> "VectorPath":
        _check_dims(self, other)
        return VectorPath([a - b for a, b in zip(self, other)])

    def map(self, f) -> "VectorPath":
        return VectorPath([f(c) for c in self.components])

    def to_json(self) -> list:
        return [c.to_json() for c in self.components]

    def __repr__(self) -> str:
        return f"VectorPath(K={len(self)}, kind={self.kind})"


def _check_dims(x, y) -> None:
    if len(x) != len(y):
        raise ValidationError(f"dimension mismatch: {len(x)} vs {len(y)}", "dimension")


def as_vector(x) -> VectorPath:
    return x if isinstance(x, VectorPath) else VectorPath([x])


class RoutingPath:
    """K x K matrix of paths indexed by the departure count of the row station.

    ``entries[i][j](u)`` is the amount of the first ``u`` units of output of
    station ``i`` sent to station ``j``.  Counting routing paths built from
    decision sequences keep those sequences in ``decisions``.
    """

    __slots__ = ("entries", "decisions", "n")

    def __init__(self, entries: Sequence[Sequence[Path]], decisions=None, n: int | None = None,
                 check: bool = True):
        rows = tuple(tuple(r) for r in entries)
        K = len(rows)
        if K == 0 or any(len(r) != K for r in rows):
            raise ValidationError("routing path must be a square matrix of paths", "square")
        self.entries = rows
        self.decisions = None if decisions is None else tuple(np.asarray(d, dtype=np.int64) for d in decisions)
        self.n = n
        if check:
            self.validate()

    @property
    def K(self) -> int:
        return len(self.entries)

    def row(self, i: int) -> tuple[Path, ...]:
        return self.entries[i]

    def row_horizon(self, i: int) -> float:
        return min(p.horizon for p in self.entries[i])

    def row_knots(self, i: int) -> np.ndarray:
        return merge_knots(self.entries[i])

    def eval(self, u) -> np.ndarray:
        return np.array([[p.eval(u) for p in r] for r in self.entries])

    def slopes_at(self, u: Sequence[float]) -> np.ndarray:
        """Derivative matrix with row ``i`` taken at ``u[i]``."""
        return np.array([[p.slope_at(float(u[i])) for p in r] for i, r in enumerate(self.entries)])

    def validate(self, tol: float = 1e-9) -> None:
        for i, r in enumerate(self.entries):
            for j, p in enumerate(r):
                if abs(p.v[0]) > tol:
                    raise ValidationError(f"routing entry ({i},{j}) must start at 0", "routing_starts_at_zero")
                if not p.is_nondecreasing():
                    raise ValidationError(f"routing entry ({i},{j}) must be nondecreasing", "nondecreasing")
            if all(not p.has_jumps for p in r):
                knots = self.row_knots(i)
                mids = 0.5 * (knots[:-1] + knots[1:]) if knots.size > 1 else knots
                total = np.sum([[p.slope_at(float(m)) for m in mids] for p in r], axis=0)
                if np.any(total > 1.0 + tol):
                    raise ValidationError(f"routing row {i} sends more than it receives", "row_increment")
            elif self.decisions is not None and self.n is not None:
                u_end = self.row_horizon(i)
                total = sum(p.eval(u_end) for p in r)
                if total > u_end + tol:
                    raise ValidationError(f"routing row {i} sends more than it receives", "row_increment")

    @classmethod
    def linear(cls, R, horizon: float) -> "RoutingPath":
        """Fluid routing ``P(u) = R u``."""
        R = np.asarray(R, dtype=float)
        K = R.shape[0]
        return cls([[linear_path(R[i, j], horizon) for j in range(K)] for i in range(K)])

    @classmethod
    def from_decisions(cls, decisions: Sequence[Sequence[int]], n: int) -> "RoutingPath":
        """Counting routing path of decision sequences (values ``0..K``, ``K`` = exit).

        ``P[i][j](u) = (1/n) #{k <= n u : decisions[i][k] = j}``.
        """
        K = len(decisions)
        rows = []
        for i, dec in enumerate(decisions):
            dec = np.asarray(dec, dtype=np.int64)
            if np.any((dec < 0) | (dec > K)):
                raise ValidationError("routing decisions must lie in 0..K", "decision_range")
            horizon = dec.size / n
            pos = np.arange(1, dec.size + 1) / n
            rows.append([StepPath(pos[dec == j], None, 0.0, horizon, n=n) for j in range(K)])
        return cls(rows, decisions=decisions, n=n)

    def to_json(self) -> list:
        return [[p.to_json() for p in r] for r in self.entries]


# ---------------------------------------------------------------------------
# path statistics

def _components(x) -> tuple[Path, ...]:
    if isinstance(x, VectorPath):
        return x.components
    if isinstance(x, Path):
        return (x,)
    return tuple(x)


def eval_path(path: Path, t):
    """Exact value of ``path`` at ``t``."""
    return path.eval(t)


def polygonal(f, n: int):
    """Linear interpolation of ``f`` between the grid points ``k/n``.

    Matches ``f`` exactly at every grid point up to the horizon; the final
    partial cell uses the tail of ``f`` past the horizon.
    """
    if isinstance(f, VectorPath):
        return VectorPath([polygonal(c, n) for c in f])
    if n <= 0 or int(n) != n:
        raise ValidationError("grid density n must be a positive integer", "positive_n")
    n = int(n)
    T = f.horizon
    m = int(np.floor(T * n + 1e-9))
    grid = np.arange(m + 1) / n
    grid = grid[grid <= T]
    vals = np.asarray(f.eval(grid), dtype=float)
    if grid[-1] < T:
        nxt = (grid.size) / n
        f_next = float(f.eval(nxt))
        frac = (T - grid[-1]) * n
        end_val = vals[-1] + frac * (f_next - vals[-1])
        tail = (f_next - vals[-1]) * n
        grid = np.append(grid, T)
        vals = np.append(vals, end_val)
    else:
        tail = (float(f.eval((m + 1) / n)) - vals[-1]) * n
    if grid.size == 1:
        grid = np.array([0.0, T if T > 0 else 1.0 / n])
        vals = np.array([vals[0], float(f.eval(grid[1]))])
    mono = bool(np.all(np.diff(vals) >= -1e-12 * max(1.0, float(np.max(np.abs(vals))))))
    if mono:
        return PiecewisePath._from_arrays(grid, vals, max(tail, 0.0) if tail > -1e-12 else tail)
    return Path(grid, vals, None, tail)


def modulus(X, delta: float, T: float) -> float:
    """``sup_{t in [0,T]} max_i |X_i(t + delta) - X_i(t)|``, exact on the knot grid."""
    if delta <= 0:
        raise ValidationError("delta must be positive", "positive_delta")
    if T < 0:
        raise ValidationError("T must be nonnegative", "nonnegative_T")
    comps = _components(X)
    knots = np.unique(np.concatenate([c.t for c in comps]))
    cand = np.concatenate([[0.0, T], knots, knots - delta])
    cand = np.unique(cand[(cand >= 0) & (cand <= T)])
    best = 0.0
    for c in comps:
        right = np.abs(np.asarray(c.eval(cand + delta)) - np.asarray(c.eval(cand)))
        left = np.abs(np.asarray(c.eval_left(cand + delta)) - np.asarray(c.eval_left(cand)))
        left = np.where(cand > 0, left, 0.0)
        best = max(best, float(np.max(right)), float(np.max(left)))
    return best


def sup_distance(X, Y, T: float) -> float:
    """Sup over ``[0, T]`` of the max-coordinate absolute difference."""
    xs, ys = _components(X), _components(Y)
    _check_dims(xs, ys)
    best = 0.0
    for a, b in zip(xs, ys):
        t = np.unique(np.concatenate([a.t, b.t, [0.0, T]]))
        t = t[t <= T]
        d = np.abs(np.asarray(a.eval(t)) - np.asarray(b.eval(t)))
        dl = np.abs(np.asarray(a.eval_left(t)) - np.asarray(b.eval_left(t)))
        best = max(best, float(np.max(d)), float(np.max(dl)))
    return best


# ---------------------------------------------------------------------------
# serialization

def path_from_json(obj: dict) -> Path:
    kind = obj.get("kind")
    if kind == "piecewise":
        bp = np.asarray(obj["breakpoints"], dtype=float)
        if bp.ndim != 2 or bp.shape[1] != 2:
            raise ValidationError("breakpoints must be (time, value) pairs", "breakpoints")
        p = PiecewisePath(bp[:, 0], bp[:, 1], obj.get("tail_slope"))
        if "horizon" in obj and abs(float(obj["horizon"]) - p.horizon) > DEDUP_TOL:
            raise ValidationError("horizon must equal the last breakpoint time", "horizon")
        return p
    if kind == "step":
        jumps = np.asarray(obj.get("jumps", []), dtype=float).reshape(-1, 2)
        n = obj.get("n")
        if n is not None:
            inc = np.rint(jumps[:, 1] * n).astype(np.int64)
            return StepPath(jumps[:, 0], inc, obj.get("initial_value", 0.0), obj.get("horizon"), n=int(n))
        return StepPath(jumps[:, 0], jumps[:, 1], obj.get("initial_value", 0.0), obj.get("horizon"))
    if kind == "path":
        k = np.asarray(obj["knots"], dtype=float)
        return Path(k[:, 0], k[:, 2], k[:, 1], obj.get("tail_slope", 0.0))
    raise ValidationError(f"unknown path kind {kind!r}", "path_kind")


def vector_from_json(obj) -> VectorPath:
    if isinstance(obj, dict) and "components" in obj:
        obj = obj["components"]
    return VectorPath([path_from_json(o) for o in obj])


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def write_csv(columns: dict[str, np.ndarray], fh: io.TextIOBase) -> None:
    """CSV with a header row, '.' decimals and LF line endings."""
    names = list(columns)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(names)
    data = [np.asarray(columns[k], dtype=float) for k in names]
    for row in zip(*data):
        writer.writerow([repr(float(x)) for x in row])


def vector_to_csv(X, grid, fh: io.TextIOBase, prefix: str = "x") -> None:
    comps = _components(X)
    grid = np.asarray(grid, dtype=float)
    cols = {"t": grid}
    for i, c in enumerate(comps):
        cols[f"{prefix}{i + 1}"] = np.asarray(c.eval(grid), dtype=float)
    write_csv(cols, fh)
