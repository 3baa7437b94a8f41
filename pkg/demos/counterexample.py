"""One swapped routing decision in the single-station feedback example."""

from __future__ import annotations

from ldq.montecarlo import counterexample


def main() -> None:
    for n in (100, 1000, 10_000):
        res = counterexample(n, 0.5, 0.5)
        print(f"n={n:6d}  network gap={res.net_gap:.1e}  flow gap={res.gap:.1e}  "
              f"case 1 departures vs arrivals={res.case1_gap:.1e}")


if __name__ == "__main__":
    main()
