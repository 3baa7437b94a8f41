"""Solve the bundled burst network and price it under its rate model."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from ldq.dynamics import solve_piecewise_linear
from ldq.network import NetworkPaths, RateModel
from ldq.ratefn import path_rate_net_breakdown

DATA = resources.files("ldq") / "data"


def main() -> None:
    net = NetworkPaths.from_json(json.loads((DATA / "burst_network.json").read_text()))
    model = RateModel.from_json(json.loads((DATA / "burst_model.json").read_text()))
    T = 4.0
    sol = solve_piecewise_linear(net, T)
    print("t      Q1      Q2")
    for t in np.linspace(0, T, 9):
        q = sol.Q.eval(t)
        print(f"{t:4.1f}  {q[0]:6.3f}  {q[1]:6.3f}")
    br = path_rate_net_breakdown(net, model, T)
    print("rate", br.total, "exogenous terms", [float(x) for x in br.exogenous])


if __name__ == "__main__":
    main()
