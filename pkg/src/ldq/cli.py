"""Command-line front end.

Each subcommand reads one JSON config (``--config``), computes all outputs in
memory, and only then writes them atomically into ``--out`` together with a
``manifest.json`` that records the resolved config, its hash, the seed and
package versions.  ``ldq replay <manifest>`` re-runs a manifest and checks
that every output is reproduced byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import platform
import sys
import tempfile
import time
from pathlib import Path as FsPath
from typing import Callable

import numpy as np

from . import __version__
from .approx import ApproxParams, verify_S_conditions
from .dynamics import solve_counting, solve_piecewise_linear
from .errors import ConfigError, LdqError, NumericError, ValidationError
from .montecarlo import RareEvent, StochasticSpec, counterexample, estimate_decay, sample_network
from .network import NetworkPaths, RateModel, fluid_network, load_json
from .paths import vector_from_json, write_csv
from .ratefn import INF, LocalRateProblem, local_rate_HQ, path_rate_net_breakdown, path_rate_Q

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_GRID = 101


# ---------------------------------------------------------------------------
# config handling

def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


def resolve(cfg, base: FsPath):
    """Inline every ``{"file": path}`` reference, relative to the config's directory."""
    if isinstance(cfg, dict):
        if set(cfg) == {"file"}:
            return resolve(load_json(str(base / cfg["file"])), base)
        return {k: resolve(v, base) for k, v in cfg.items()}
    if isinstance(cfg, list):
        return [resolve(v, base) for v in cfg]
    return cfg


def _need(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config lacks required key {key!r}")
    return cfg[key]


def _network(obj: dict) -> NetworkPaths:
    if obj.get("kind") == "fluid":
        return fluid_network(_need(obj, "lam"), _need(obj, "mu"), _need(obj, "routing"),
                             float(_need(obj, "horizon")), obj.get("routing_horizon"))
    return NetworkPaths.from_json(obj)


def _grid(T: float, points: int, knots: np.ndarray | None = None) -> np.ndarray:
    if points < 2:
        raise ConfigError("--grid needs at least 2 points")
    g = np.linspace(0.0, T, points)
    if knots is not None:
        g = np.unique(np.concatenate([g, knots[(knots >= 0) & (knots <= T)]]))
    return g


def _fmt(x):
    if isinstance(x, float) and x == INF:
        return "inf"
    if isinstance(x, (np.floating,)):
        return _fmt(float(x))
    if isinstance(x, np.ndarray):
        return [_fmt(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    return x


def _csv(columns: dict, stamp: str) -> str:
    buf = io.StringIO(newline="")
    buf.write(stamp + "\n")
    write_csv(columns, buf)
    return buf.getvalue()


def _json(obj, stamp_fields: dict) -> str:
    out = dict(_fmt(obj))
    out.update(stamp_fields)
    return json.dumps(out, sort_keys=True, indent=1) + "\n"


class Ctx:
    def __init__(self, cfg: dict, seed: int, grid: int):
        self.cfg = cfg
        self.seed = seed
        self.grid = grid
        self.hash = config_hash({"config": cfg, "seed": seed, "grid": grid})

    @property
    def stamp(self) -> str:
        return f"# seed={self.seed} config_sha256={self.hash}"

    @property
    def fields(self) -> dict:
        return {"seed": self.seed, "config_sha256": self.hash}


# ---------------------------------------------------------------------------
# subcommands; each returns {filename: text}

def cmd_fluid(ctx: Ctx) -> dict:
    cfg = ctx.cfg
    net = _network(_need(cfg, "network"))
    T = float(cfg.get("T", min(s.horizon for s in net.S)))
    sol = solve_piecewise_linear(net, T)
    knots = sol.knots()
    cols = sol.table(_grid(T, ctx.grid, knots))
    bps = {f"{name}{i + 1}": [[float(a), float(b)] for a, b in zip(p.t, p.v)]
           for name, vec in (("A", sol.A), ("D", sol.D)) for i, p in enumerate(vec)}
    return {"flow.csv": _csv(cols, ctx.stamp),
            "breakpoints.json": _json({"T": T, "breakpoints": bps}, ctx.fields)}


def cmd_rate(ctx: Ctx) -> dict:
    cfg = ctx.cfg
    model = RateModel.from_json(_need(cfg, "model"))
    T = float(_need(cfg, "T"))
    if "queue" in cfg:
        Q = vector_from_json(cfg["queue"])
        value, rows = path_rate_Q(Q, model, T, detail=True)
        for r in rows:
            if r["value"] != "inf":
                res = local_rate_HQ(LocalRateProblem("Q", np.where(r["empty"], 0.0, 1.0),
                                                     np.array(r["qdot"]), model))
                r["argmin"] = res.to_json()
        out = {"kind": "queue", "value": value, "segments": rows}
    else:
        net = _network(_need(cfg, "network"))
        rr = cfg.get("routing_range")
        br = path_rate_net_breakdown(net, model, T, rr)
        out = {"kind": "network"}
        out.update(br.to_json())
    return {"rate.json": _json(out, ctx.fields)}


def cmd_approx(ctx: Ctx) -> dict:
    cfg = ctx.cfg
    net = _network(_need(cfg, "network"))
    model = RateModel.from_json(_need(cfg, "model"))
    T = float(_need(cfg, "T"))
    if "A" in cfg and "D" in cfg:
        A, D = vector_from_json(cfg["A"]), vector_from_json(cfg["D"])
    else:
        sol = solve_piecewise_linear(net, T)
        A, D = sol.A, sol.D
    delta_bar = _need(cfg, "delta_bar")
    scales = [int(n) for n in _need(cfg, "scales")]
    sched = [ApproxParams.schedule(n, delta_bar, net.exogenous_set, net.K) for n in scales]
    rep = verify_S_conditions(net, A, D, sched, model, T)
    cols = {"n": rep.column("n"), "S2": rep.column("S2"), "S3": rep.column("S3"), "S4": rep.column("S4")}
    return {"report.json": _json(rep.to_json(), ctx.fields), "gaps.csv": _csv(cols, ctx.stamp)}


def cmd_counterexample(ctx: Ctx) -> dict:
    cfg = ctx.cfg
    n, x, alpha = int(_need(cfg, "n")), float(_need(cfg, "x")), float(_need(cfg, "alpha"))
    T = float(cfg.get("T", 3.0))
    res = counterexample(n, x, alpha, T)
    g = _grid(T, ctx.grid)
    cols = {"t": g}
    for k, sol in ((1, res.sol1), (2, res.sol2)):
        cols[f"A{k}"] = np.asarray(sol.A[0].eval(g), dtype=float)
        cols[f"D{k}"] = np.asarray(sol.D[0].eval(g), dtype=float)
        cols[f"Q{k}"] = cols[f"A{k}"] - cols[f"D{k}"]
    return {"summary.json": _json(res.summary(), ctx.fields), "paths.csv": _csv(cols, ctx.stamp)}


def cmd_simulate(ctx: Ctx) -> dict:
    cfg = ctx.cfg
    spec = StochasticSpec.from_json(_need(cfg, "spec"), seed=ctx.seed)
    n, T = int(_need(cfg, "n")), float(_need(cfg, "T"))
    replica = int(cfg.get("replica", 0))
    net, _ = sample_network(spec, n, T, replica)
    sol = solve_counting(net)
    knots = sol.knots()
    g = _grid(T, ctx.grid, knots)
    summary = {"n": n, "T": T, "replica": replica, "K": spec.K,
               "arrivals": [int(p.counts[-1]) for p in net.N],
               "departures": [int(p.counts[-1]) for p in sol.D],
               "final_queue": [int(a.counts[-1] - d.counts[-1]) for a, d in zip(sol.A, sol.D)]}
    return {"paths.csv": _csv(sol.table(g), ctx.stamp), "summary.json": _json(summary, ctx.fields)}


def cmd_mc_ldp(ctx: Ctx) -> dict:
    cfg = ctx.cfg
    spec = StochasticSpec.from_json(_need(cfg, "spec"), seed=ctx.seed)
    ev = _need(cfg, "event")
    event = RareEvent(int(ev.get("station", 0)), float(ev["q"]), float(ev["T"]))
    scales = [int(n) for n in _need(cfg, "scales")]
    table = estimate_decay(spec, event, scales, int(cfg.get("replicas", 10_000)))
    cols = {k: np.array([getattr(r, k) for r in table.rows], dtype=float)
            for k in ("n", "hits", "p_hat", "decay", "stderr")}
    return {"decay.csv": _csv(cols, ctx.stamp), "summary.json": _json(table.to_json(), ctx.fields)}


COMMANDS: dict[str, Callable[[Ctx], dict]] = {
    "simulate": cmd_simulate,
    "fluid": cmd_fluid,
    "rate": cmd_rate,
    "approx": cmd_approx,
    "counterexample": cmd_counterexample,
    "mc-ldp": cmd_mc_ldp,
}


# ---------------------------------------------------------------------------
# output and manifest

def atomic_write(path: FsPath, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def versions() -> dict:
    import scipy
    return {"ldq": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def execute(command: str, cfg: dict, seed: int, grid: int, out: FsPath, inputs: list) -> dict:
    ctx = Ctx(cfg, seed, grid)
    t0 = time.perf_counter()
    files = COMMANDS[command](ctx)
    wall = time.perf_counter() - t0
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    outputs = []
    for name in sorted(files):
        atomic_write(out / name, files[name])
        outputs.append({"name": name, "sha256": hashlib.sha256(files[name].encode("utf-8")).hexdigest()})
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": ctx.hash,
        "seed": seed,
        "grid": grid,
        "versions": versions(),
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": wall,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def _file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run_command(args) -> dict:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg_path = FsPath(args.config)
    raw = load_json(str(cfg_path))
    cfg = resolve(raw, cfg_path.parent)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    grid = args.grid if args.grid is not None else int(cfg.get("grid", DEFAULT_GRID))
    inputs = [{"path": str(cfg_path), "sha256": _file_digest(str(cfg_path))}]
    return execute(args.command, cfg, seed, grid, FsPath(args.out), inputs)


def replay(manifest_path: str, out: str | None) -> dict:
    man = load_json(manifest_path)
    for key in ("command", "config", "seed", "grid", "outputs"):
        if key not in man:
            raise ConfigError(f"manifest lacks {key!r}")
    if man["command"] not in COMMANDS:
        raise ConfigError(f"unknown command {man['command']!r} in manifest")
    target = FsPath(out) if out else FsPath(tempfile.mkdtemp(prefix="ldq-replay-"))
    new = execute(man["command"], man["config"], int(man["seed"]), int(man["grid"]), target,
                  [{"manifest": manifest_path}])
    old = {o["name"]: o["sha256"] for o in man["outputs"]}
    got = {o["name"]: o["sha256"] for o in new["outputs"]}
    mismatched = sorted(k for k in set(old) | set(got) if old.get(k) != got.get(k))
    return {"identical": not mismatched, "mismatched": mismatched, "out": str(target),
            "config_sha256_match": new["config_sha256"] == man.get("config_sha256")}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldq", description="Queueing-network flows and rate functions.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
        p.add_argument("--grid", type=int, default=None, help="CSV grid points")
    p = sub.add_parser("replay")
    p.add_argument("manifest")
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            result = replay(args.manifest, args.out)
            print(json.dumps(result, sort_keys=True))
            return EXIT_OK if result["identical"] else EXIT_VALIDATION
        manifest = run_command(args)
        print(json.dumps(manifest, sort_keys=True))
        return EXIT_OK
    except LdqError as exc:
        code = {ConfigError: EXIT_CONFIG, ValidationError: EXIT_VALIDATION,
                NumericError: EXIT_NUMERIC}.get(type(exc), EXIT_NUMERIC)
        detail = {"error": exc.reason, "message": str(exc)}
        if isinstance(exc, ValidationError):
            detail["invariant"] = exc.invariant
        print(json.dumps(detail, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
