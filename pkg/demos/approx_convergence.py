"""Grid approximations of a two-station fluid network and their distances."""

from __future__ import annotations

import json
from importlib import resources

from ldq.approx import ApproxParams, verify_S_conditions
from ldq.dynamics import solve_piecewise_linear
from ldq.network import RateModel, fluid_network

DATA = resources.files("ldq") / "data"


def main() -> None:
    net = fluid_network([1, 0], [2, 0.5], [[0, 0.5], [0.25, 0]], horizon=1.0, routing_horizon=5.0)
    model = RateModel.from_json(json.loads((DATA / "twostation_model.json").read_text()))
    sol = solve_piecewise_linear(net, 1.0)
    sched = [ApproxParams.schedule(n, 0.5, net.exogenous_set, net.K) for n in (10, 20, 40, 80, 160)]
    rep = verify_S_conditions(net, sol.A, sol.D, sched, model, 1.0)
    print("   n   network gap   flow gap   rate gap")
    for r in rep.rows:
        print(f"{r['n']:4d}   {r['S2']:.5f}      {r['S3']:.5f}    {r['S4']:.6f}")
    print("flags:", rep.flags or "none")


if __name__ == "__main__":
    main()
