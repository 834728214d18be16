"""Command line: ``python -m gamlink {fit,predict,quantile-fit,nested-fit,simulate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from ._solvers import RootFindingError
from .gam import FitConfig, evaluate_regression, fit_gam
from .io import DataError, load_model, read_covariates, read_dataset, save_model, write_predictions
from .nested import NestedModel, NetworkSpec, evaluate_network, fit_nested
from .penalty import PenaltyConfig
from .quantile import QuantileConfig, fit_quantile_gam, fit_quantile_nested
from .simulation import SimConfig, run_monte_carlo, write_figure_data

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("gamlink")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def parse(text: str):
        try:
            items = [kind(t) for t in text.split(",") if t.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items

    return parse


def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--response", required=True)
    p.add_argument("--covariates", required=True, type=_csv_list(str), help="comma-separated column names")
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--nu1", type=float, default=1.0)
    p.add_argument("--nu2", type=float, default=1.0)
    p.add_argument("--m-knots", type=int, default=4, help="interior knots of each inner function")
    p.add_argument("--f-knots", type=int, default=4, help="interior knots of the link / outer function")
    p.add_argument("--order", type=int, default=None, help="spline order (default 2k)")
    p.add_argument("--max-sweeps", type=int, default=200)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gamlink", description="Additive models with an unknown link, fitted by penalised splines.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _fit_flags(sub.add_parser("fit", help="penalised least-squares fit"))

    p = sub.add_parser("predict", help="evaluate a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--covariates", type=_csv_list(str), default=None,
                   help="columns to read (default: the names stored in the model)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantile-fit", help="penalised regression quantile")
    _fit_flags(p)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--spec", default=None, help="optional network JSON: fit a nested quantile model")

    p = sub.add_parser("nested-fit", help="nested composition model")
    p.add_argument("--spec", required=True)
    _fit_flags(p)

    p = sub.add_parser("simulate", help="Monte Carlo study on the two-component test model")
    p.add_argument("--table1", action="store_true", help="the design of the reference table (defaults below)")
    p.add_argument("--n", type=_csv_list(int), default=[400, 900])
    p.add_argument("--lambda", dest="lam", type=_csv_list(float), default=[0.1])
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--seed", type=int, default=20070601)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--figure-data", default=None, metavar="DIR")
    return parser


def _fit_config(args) -> FitConfig:
    try:
        return FitConfig(
            lam=args.lam,
            penalty=PenaltyConfig(k=args.k, nu1=args.nu1, nu2=args.nu2),
            m_interior_knots=args.m_knots,
            f_interior_knots=args.f_knots,
            spline_order=args.order,
            max_sweeps=args.max_sweeps,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_spec(path: str) -> NetworkSpec:
    try:
        return NetworkSpec.load(path)
    except OSError as exc:
        raise DataError(f"cannot read spec {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid network spec: {exc}") from exc


def _report(res) -> None:
    status = "converged" if res.converged else "not converged"
    print(f"objective {res.objective:.10g} after {res.sweeps_used} sweeps ({status})")


def _store(res, args, k: int) -> None:
    res.model.meta.update(
        covariates=list(args.covariates), response=args.response, **{"lambda": args.lam},
        nu1=args.nu1, nu2=args.nu2, sweeps=res.sweeps_used, objective=float(res.objective),
        converged=bool(res.converged),
    )
    save_model(res.model, args.out, k)
    _report(res)


def cmd_fit(args) -> int:
    cfg = _fit_config(args)
    data = read_dataset(args.data, args.response, args.covariates)
    res = fit_gam(data, cfg)
    _store(res, args, cfg.penalty.k)
    return EXIT_OK


def cmd_quantile(args) -> int:
    cfg = _fit_config(args)
    try:
        qcfg = QuantileConfig(args.alpha, args.epsilon, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = read_dataset(args.data, args.response, args.covariates)
    if args.spec:
        spec = _load_spec(args.spec)
        _check_columns(spec, data)
        res = fit_quantile_nested(data, spec, qcfg)
    else:
        res = fit_quantile_gam(data, qcfg)
    _store(res, args, cfg.penalty.k)
    return EXIT_OK


def _check_columns(spec: NetworkSpec, data) -> None:
    if spec.n_columns > data.d:
        raise UsageError(f"spec reads covariate column {spec.n_columns - 1} but only {data.d} were given")


def cmd_nested(args) -> int:
    cfg = _fit_config(args)
    spec = _load_spec(args.spec)
    data = read_dataset(args.data, args.response, args.covariates)
    _check_columns(spec, data)
    res = fit_nested(data, spec, cfg)
    _store(res, args, cfg.penalty.k)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    cols = args.covariates or model.meta.get("covariates")
    if not cols:
        raise UsageError("model file has no covariate names; pass --covariates")
    x = read_covariates(args.data, cols)
    if isinstance(model, NestedModel):
        if model.spec.n_columns > x.shape[1]:
            raise UsageError("too few covariate columns for this network")
        yhat, clamps = evaluate_network(model, x)
    else:
        if len(model.components) != x.shape[1]:
            raise UsageError(f"model has {len(model.components)} components but {x.shape[1]} covariates were given")
        yhat, clamps = evaluate_regression(model, x)
        clamps = (np.asarray(clamps) > 0).astype(int)
    write_predictions(args.out, yhat, clamps)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        sim = SimConfig(
            n_values=tuple(args.n), lambdas=tuple(args.lam), replications=args.reps,
            seed=args.seed, workers=args.workers,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = run_monte_carlo(sim, progress=log.info)
    Path(args.out).write_text(report.to_csv())
    if args.figure_data:
        for cell in report.cells:
            write_figure_data(report, cell, args.figure_data)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "quantile-fit": cmd_quantile,
    "nested-fit": cmd_nested,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RootFindingError, sla.LinAlgError, np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
