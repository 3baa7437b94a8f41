"""Crude Monte Carlo decay of P(Q(1) >= 0.3) for M/M/1 against the two-segment value."""

from __future__ import annotations

import warnings

from ldq.montecarlo import RareEvent, StochasticSpec, estimate_decay


def main() -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = estimate_decay(StochasticSpec.mm1(0.5, 1.0, seed=1), RareEvent(0, 0.3, 1.0), [10, 20, 40], 5000)
    print("variational value", round(table.variational, 5), table.kink)
    for r in table.rows:
        tag = " (lower bound)" if r.lower_bound_only else ""
        print(f"n={r.n:3d}  hits={r.hits:5d}  p={r.p_hat:.2e}  decay={r.decay:.4f}{tag}")


if __name__ == "__main__":
    main()
