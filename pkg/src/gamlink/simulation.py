"""Monte Carlo study for ``Y = F[sin(pi x1) + Phi(3 x2)] + U`` on a square grid.

Integrated squared errors are measured after both the estimate and the truth
are put in canonical form (components centred, unit total L2 norm, increasing
link); the link error is integrated through the true canonical index.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .gam import Dataset, FitConfig, GamModel, fit_gam, canonicalize

log = logging.getLogger(__name__)

FUNCTIONS = ("m1", "m2", "F")
FIGURE_GRID = 201


def std_normal_cdf(x):
    """Standard normal CDF, ``0.5 * erfc(|x| / sqrt 2)`` reflected for x > 0.

    ``erfc`` carries ~1e-16 relative error, so the absolute error is far
    below 1e-12; computing the lower tail once and reflecting makes
    ``Phi(x) + Phi(-x) == 1`` up to one rounding.
    """
    x = np.asarray(x, dtype=float)
    tail = 0.5 * special.erfc(np.abs(x) / np.sqrt(2.0))
    out = np.where(x > 0, 1.0 - tail, tail)
    return float(out) if out.ndim == 0 else out


# -- truth ------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthModel:
    """Known regression function ``link(sum_j components[j](x_j))`` on [0, 1]^d."""

    link: Callable[[np.ndarray], np.ndarray]
    components: tuple[Callable[[np.ndarray], np.ndarray], ...]

    @property
    def d(self) -> int:
        return len(self.components)

    def eval_component(self, j: int, x) -> np.ndarray:
        return self.components[j](np.asarray(x, dtype=float))

    def eval_link(self, z) -> np.ndarray:
        return self.link(np.asarray(z, dtype=float))

    def regression(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.link(sum(m(x[:, j]) for j, m in enumerate(self.components)))

    def canonical(self) -> "CanonicalTruth":
        means = np.array([
            integrate.quad(m, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
            for m in self.components
        ])
        sq = sum(
            integrate.quad(lambda x, m=m, mu=mu: (m(x) - mu) ** 2, 0.0, 1.0,
                           epsabs=1e-14, epsrel=1e-13, limit=200)[0]
            for m, mu in zip(self.components, means)
        )
        return CanonicalTruth(self, means, float(np.sqrt(sq)))


@dataclass(frozen=True, eq=False)
class CanonicalTruth:
    """``m_j -> (m_j - mean_j) / scale`` and ``F(z) -> F(scale z + sum means)``."""

    original: TruthModel
    means: np.ndarray
    scale: float

    @property
    def d(self) -> int:
        return self.original.d

    def eval_component(self, j: int, x) -> np.ndarray:
        return (self.original.eval_component(j, x) - self.means[j]) / self.scale

    def eval_link(self, z) -> np.ndarray:
        return self.original.eval_link(self.scale * np.asarray(z, dtype=float) + self.means.sum())

    def to_original_component(self, j: int, values: np.ndarray) -> np.ndarray:
        return self.scale * values + self.means[j]

    def to_canonical_index(self, z: np.ndarray) -> np.ndarray:
        return (z - self.means.sum()) / self.scale


# module-level so that truths pickle into worker processes
def _identity(z):
    return np.asarray(z, dtype=float) * 1.0


def _sin_pi(x):
    return np.sin(np.pi * np.asarray(x, dtype=float))


def _phi_3x(x):
    return std_normal_cdf(3.0 * np.asarray(x, dtype=float))


def benchmark_truth() -> TruthModel:
    return TruthModel(link=_identity, components=(_sin_pi, _phi_3x))


def grid_design(n: int) -> np.ndarray:
    r = int(round(np.sqrt(n)))
    if r * r != n or n < 1:
        raise ValueError(f"n={n} is not a perfect square")
    g = np.arange(1, r + 1) / (r + 1)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def gaussian_noise(n: int, seed: int, replication: int = 0) -> np.ndarray:
    """Standard normals; draw ``i`` depends only on ``(seed, replication, i)``.

    Philox is counter based: the i-th 64-bit word of the stream keyed by
    ``(seed, replication)`` is mapped to a uniform in (0, 1) and through the
    normal quantile function.
    """
    key = np.array([seed % 2**64, replication % 2**64], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(n)
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return special.ndtri(u)


def benchmark_data(n: int, seed: int, replication: int = 0) -> tuple[Dataset, TruthModel]:
    truth = benchmark_truth()
    x = grid_design(n)
    y = truth.regression(x) + gaussian_noise(n, seed, replication)
    return Dataset(x, y), truth


# -- errors -------------------------------------------------------------------------

def trapezoid_weights(grid_points: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.linspace(0.0, 1.0, grid_points)
    w = np.full(grid_points, 1.0 / (grid_points - 1))
    w[[0, -1]] *= 0.5
    return x, w


def imse_component(estimate: Callable, truth: Callable, grid_points: int = 1001) -> float:
    """Trapezoid-rule integral over [0, 1] of ``(estimate - truth)^2``.

    Callers pass functions already in the same (canonical) parameterisation.
    """
    x, w = trapezoid_weights(grid_points)
    diff = np.asarray(estimate(x)) - np.asarray(truth(x))
    return float(w @ (diff * diff))


def imse_link(estimate_model, truth_model, grid_points: int = 1001) -> float:
    """Integral over [0, 1]^d of ``(F_hat(z) - F(z))^2`` at the true index ``z``.

    Both models expose ``eval_component`` / ``eval_link`` (a :class:`GamModel`
    or a :class:`CanonicalTruth`).  The tensor grid has ``grid_points^d``
    nodes, so this is meant for d <= 2.
    """
    x, w = trapezoid_weights(grid_points)
    d = truth_model.d
    z = np.zeros((1,) * d)
    wt = np.ones((1,) * d)
    for j in range(d):
        shape = [1] * d
        shape[j] = grid_points
        z = z + truth_model.eval_component(j, x).reshape(shape)
        wt = wt * w.reshape(shape)
    z = z.ravel()
    diff = estimate_model.eval_link(z) - truth_model.eval_link(z)
    return float(wt.ravel() @ (diff * diff))


# -- Monte Carlo ----------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n_values: tuple[int, ...] = (400,)
    lambdas: tuple[float, ...] = (0.10,)
    replications: int = 500
    seed: int = 20070601
    fit: FitConfig = field(default_factory=FitConfig)
    grid_points_for_imse: int = 1001
    workers: int = 1

    def __post_init__(self):
        for n in self.n_values:
            grid_design(n)
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.lambdas:
            raise ValueError("need at least one lambda")


@dataclass(eq=False)
class CellResult:
    n: int
    lam: float
    raw: np.ndarray  # (replications, 3): m1, m2, F
    curves: np.ndarray  # (replications, 3, FIGURE_GRID), truth units
    converged: np.ndarray
    monotone: np.ndarray
    j_values: np.ndarray
    sweeps: np.ndarray

    @property
    def means(self) -> np.ndarray:
        return self.raw.mean(axis=0)

    @property
    def nonconverged(self) -> int:
        return int(np.sum(~self.converged))

    def percentile_indices(self, q: Sequence[float] = (25, 50, 75)) -> dict[str, list[int]]:
        """Replication index at each IMSE percentile, per function."""
        R = self.raw.shape[0]
        out = {}
        for f, name in enumerate(FUNCTIONS):
            order = np.argsort(self.raw[:, f], kind="stable")
            out[name] = [int(order[int(round(p / 100.0 * (R - 1)))]) for p in q]
        return out


@dataclass(eq=False)
class ImseReport:
    cells: dict[tuple[int, float], CellResult]
    truth: CanonicalTruth
    figure_x: dict[str, np.ndarray]

    def rows(self) -> list[dict]:
        """Mean IMSEs per cell.  ``*_truth_units`` measure the component errors
        against the untransformed ``sin(pi x)`` and ``Phi(3x)`` (the canonical
        errors times ``scale^2``); the link error is the same in both units."""
        out = []
        s2 = self.truth.scale**2
        for (n, lam), c in sorted(self.cells.items()):
            m = c.means
            out.append({
                "n": n, "lambda": lam,
                "imse_m1": m[0], "imse_m2": m[1], "imse_F": m[2],
                "imse_m1_truth_units": s2 * m[0], "imse_m2_truth_units": s2 * m[1],
                "nonconverged": c.nonconverged,
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["imse_m1", "imse_m2", "imse_F", "imse_m1_truth_units", "imse_m2_truth_units"]
        w.writerow(["n", "lambda", *cols, "nonconverged"])
        for r in self.rows():
            w.writerow([r["n"], repr(r["lambda"]), *(repr(float(r[c])) for c in cols), r["nonconverged"]])
        return buf.getvalue()


def figure_grids(truth: CanonicalTruth) -> dict[str, np.ndarray]:
    x = np.linspace(0.0, 1.0, FIGURE_GRID)
    fine = np.linspace(0.0, 1.0, 4001)
    zlo = sum(float(np.min(truth.original.eval_component(j, fine))) for j in range(truth.d))
    zhi = sum(float(np.max(truth.original.eval_component(j, fine))) for j in range(truth.d))
    return {"m1": x, "m2": x, "F": np.linspace(zlo, zhi, FIGURE_GRID)}


def _replication(args) -> dict:
    n, lam, rep, seed, fit_cfg, grid_points, truth, fx = args
    data, _ = benchmark_data(n, seed, rep)
    cfg = replace(fit_cfg, lam=lam)
    res = fit_gam(data, cfg)
    est = canonicalize(res.model)
    errs = [
        imse_component(lambda x, j=j: est.eval_component(j, x),
                       lambda x, j=j: truth.eval_component(j, x), grid_points)
        for j in range(2)
    ]
    errs.append(imse_link(est, truth, grid_points))
    curves = np.stack([
        truth.to_original_component(0, est.eval_component(0, fx["m1"])),
        truth.to_original_component(1, est.eval_component(1, fx["m2"])),
        est.eval_link(truth.to_canonical_index(fx["F"])),
    ])
    tr = np.asarray(res.objective_trace)
    monotone = bool(np.all(np.diff(tr) <= 1e-12 * (1.0 + np.abs(tr[:-1]))))
    return {"errs": errs, "curves": curves, "converged": res.converged,
            "monotone": monotone, "J": res.j_value, "sweeps": res.sweeps_used}


def run_monte_carlo(sim: SimConfig, progress: Callable[[str], None] | None = None) -> ImseReport:
    truth = benchmark_truth().canonical()
    fx = figure_grids(truth)
    cells = {}
    for n in sim.n_values:
        for lam in sim.lambdas:
            jobs = [(n, lam, r, sim.seed, sim.fit, sim.grid_points_for_imse, truth, fx)
                    for r in range(sim.replications)]
            if sim.workers > 1:
                with ProcessPoolExecutor(sim.workers) as ex:
                    out = list(ex.map(_replication, jobs, chunksize=4))
            else:
                out = [_replication(j) for j in jobs]
            cells[(n, lam)] = CellResult(
                n, lam,
                raw=np.array([o["errs"] for o in out]),
                curves=np.stack([o["curves"] for o in out]),
                converged=np.array([o["converged"] for o in out]),
                monotone=np.array([o["monotone"] for o in out]),
                j_values=np.array([o["J"] for o in out]),
                sweeps=np.array([o["sweeps"] for o in out]),
            )
            if progress is not None:
                m = cells[(n, lam)].means
                progress(f"n={n} lambda={lam}: imse m1={m[0]:.4f} m2={m[1]:.4f} F={m[2]:.5f}")
    return ImseReport(cells, truth, fx)


def emit_figure_data(report: ImseReport, cell: tuple[int, float]) -> dict[str, str]:
    """CSV text per function with truth, mean estimate and the estimates of the
    replications at the 25th/50th/75th IMSE percentiles (truth units)."""
    if cell not in report.cells:
        raise KeyError(f"no cell {cell} in report")
    c = report.cells[cell]
    idx = c.percentile_indices()
    truth = report.truth.original
    out = {}
    for f, name in enumerate(FUNCTIONS):
        x = report.figure_x[name]
        true_vals = truth.eval_link(x) if name == "F" else truth.eval_component(f, x)
        cols = [x, true_vals, c.curves[:, f, :].mean(axis=0)] + [c.curves[i, f, :] for i in idx[name]]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "truth", "mean_estimate", "p25_estimate", "p50_estimate", "p75_estimate"])
        for row in np.column_stack(cols):
            w.writerow([repr(float(v)) for v in row])
        out[name] = buf.getvalue()
    return out


def write_figure_data(report: ImseReport, cell: tuple[int, float], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    n, lam = cell
    for name, text in emit_figure_data(report, cell).items():
        p = directory / f"figure_n{n}_lambda{lam:g}_{name}.csv"
        p.write_text(text)
        paths.append(p)
    return paths
