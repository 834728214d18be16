"""Monte Carlo IMSE table on the two-covariate benchmark, plus figure curves.

    python3 scripts/benchmark.py --reps 500 --n 400 900 --lambdas 0.05 0.1 0.2 --out results/benchmark
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from gamlink import FitConfig
from gamlink.simulation import SimConfig, run_monte_carlo, write_figure_data

log = logging.getLogger("benchmark")


@dataclass
class Experiment:
    n_values: list[int] = field(default_factory=lambda: [400, 900])
    lambdas: list[float] = field(default_factory=lambda: [0.10])
    reps: int = 500
    seed: int = 20070601
    m_knots: int = 4
    f_knots: int = 4
    workers: int = os.cpu_count() or 1
    out: str = "results/benchmark"

    def sim(self) -> SimConfig:
        fit = FitConfig(m_interior_knots=self.m_knots, f_interior_knots=self.f_knots)
        return SimConfig(tuple(self.n_values), tuple(self.lambdas), self.reps, self.seed, fit,
                         workers=self.workers)


def parse() -> Experiment:
    d = Experiment()
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n", type=int, nargs="+", default=d.n_values)
    p.add_argument("--lambdas", type=float, nargs="+", default=d.lambdas)
    p.add_argument("--reps", type=int, default=d.reps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--m-knots", type=int, default=d.m_knots)
    p.add_argument("--f-knots", type=int, default=d.f_knots)
    p.add_argument("--workers", type=int, default=d.workers)
    p.add_argument("--out", default=d.out)
    a = p.parse_args()
    return Experiment(a.n, a.lambdas, a.reps, a.seed, a.m_knots, a.f_knots, a.workers, a.out)


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    exp = parse()
    out = Path(exp.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = run_monte_carlo(exp.sim(), progress=log.info)
    (out / "report.csv").write_text(report.to_csv())
    for cell in report.cells:
        write_figure_data(report, cell, out / "figures")
    (out / "config.json").write_text(json.dumps(asdict(exp), indent=2))
    log.info("done in %.0f s; wrote %s", time.perf_counter() - t0, out)
    print(report.to_csv(), end="")


if __name__ == "__main__":
    main()
