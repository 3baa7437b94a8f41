"""Local queue rate of an M/M/1 queue against its closed form and a dual bound."""

from __future__ import annotations

import math

from ldq.network import RateModel
from ldq.ratefn import LocalRateProblem, PoissonRate, dual_grid_oracle, local_rate_HQ


def main() -> None:
    model = RateModel([PoissonRate(2.0)], [PoissonRate(1.0)], [[0.0]])
    for qdot in (-1.0, -0.5, 0.0, 0.5, 1.0):
        p = LocalRateProblem("Q", [1.0], [qdot], model)
        res = local_rate_HQ(p)
        z = (qdot + math.sqrt(qdot * qdot + 8.0)) / 2.0
        exact = max(qdot * math.log(z) - (z - 1) - 2 * (1 / z - 1), 0.0) + 0.0
        print(f"qdot={qdot:+.1f}  solver={res.value:.8f}  closed form={exact:.8f}  "
              f"dual bound={dual_grid_oracle(p):.8f}  service rate={res.D[0]:.4f}")


if __name__ == "__main__":
    main()
