"""``shiftfdr`` command line.

Exit codes: 0 success, 1 failed invariant checks, 2 config or usage error,
3 numeric failure (the message names the cell), 4 data ingestion error,
5 rank-deficient design, 6 too few rows for knockoffs (n < 2d).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_to_dict, load_config, parse_config, write_results
from .corr import STRUCTURE_KINDS, normalize_to_correlation, tau_profile
from .dist import CHISQ1, DistributionKind
from .harness import NumericalFailure, run_experiment
from .procedures import MEAN_PROCEDURES, run_procedure
from .regression import (
    PAIRED_PROCEDURES,
    RegressionData,
    beta1_profile,
    coefficient_pvalues,
    construct_knockoffs,
    fission,
    knockoff_statistics,
    ols_fit,
    paired_pvalues,
    run_paired_procedure,
)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INGEST = 4
EXIT_RANK = 5
EXIT_SHAPE = 6


class IngestError(ValueError):
    pass


class _ShapeError(ValueError):
    pass


def _alpha(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha {text!r}") from None
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError("alpha must lie in (0, 1)")
    return value


def _add_run_parser(sub, scenario, help_text):
    p = sub.add_parser(scenario, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", type=Path, default=None,
                   help="YAML config (or a JSON sidecar from an earlier run); flags override its values")
    p.add_argument("--out", type=Path, default=Path(f"{scenario}_results.csv"),
                   help="results CSV; the resolved config is written next to it with a .json suffix")
    p.add_argument("--seed", type=int, default=None, help="master seed (config default 0)")
    p.add_argument("--reps", type=int, default=None, help="Monte Carlo replications (config default 200)")
    p.add_argument("--alpha", type=_alpha, action="append", default=None,
                   help="target FDR level, repeatable (config default 0.05)")
    p.add_argument("--procedures", default=None,
                   help="comma separated procedure names (config default bh,by,gsbh3)")
    p.add_argument("--structure", choices=STRUCTURE_KINDS, default=None, help="correlation structure")
    p.add_argument("--rho", type=float, default=None, help="structure correlation parameter")
    p.add_argument("--d", type=int, default=None, help="number of hypotheses / predictors")
    p.add_argument("--n", type=int, default=None, help="sample size (varsel, knockoff)")
    p.add_argument("--variance", choices=("known", "estimated"), default=None,
                   help="noise variance treatment (config default known)")
    p.add_argument("--workers", type=int, default=None, help="worker threads (config default 1)")
    p.set_defaults(handler=_cmd_run, scenario=scenario)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftfdr",
        description="Shifted Benjamini-Hochberg procedures for correlated two-sided tests.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub, "means", "simulate two-sided mean testing")
    _add_run_parser(sub, "varsel", "simulate OLS variable selection")
    _add_run_parser(sub, "knockoff", "simulate knockoff-assisted paired selection")

    a = sub.add_parser("analyze", help="select variables in a CSV dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    a.add_argument("data", type=Path, help="CSV with a header row and a response column named y")
    a.add_argument("--procedure", default="gsbh3",
                   help=f"one of {', '.join(MEAN_PROCEDURES + PAIRED_PROCEDURES)}")
    a.add_argument("--alpha", type=_alpha, default=0.05, help="target FDR level")
    a.add_argument("--variance", choices=("known", "estimated"), default="estimated",
                   help="'known' takes the noise variance to be one")
    a.add_argument("--center", action="store_true", help="center y and every column before standardizing")
    a.add_argument("--json", type=Path, default=None, dest="json_out", help="also write the selection as JSON")
    a.set_defaults(handler=_cmd_analyze)

    c = sub.add_parser("check", help="run the numeric invariant suite")
    c.add_argument("--quick", action="store_true", help="smaller grids")
    c.set_defaults(handler=_cmd_check)
    return parser


def _overrides(args) -> dict:
    out = {"experiment.scenario": args.scenario}
    pairs = {
        "experiment.seed": args.seed,
        "experiment.replications": args.reps,
        "experiment.alphas": args.alpha,
        "experiment.procedures": args.procedures,
        "experiment.n": args.n,
        "experiment.variance": args.variance,
        "experiment.workers": args.workers,
        "structure.kind": args.structure,
        "structure.rho": args.rho,
        "structure.d": args.d,
    }
    out.update({k: v for k, v in pairs.items() if v is not None})
    return out


def _cmd_run(args) -> int:
    overrides = _overrides(args)
    try:
        if args.config is not None:
            config = load_config(args.config, overrides)
            if config.scenario != args.scenario:
                raise ConfigError(f"config scenario {config.scenario!r} does not match command {args.scenario!r}",
                                  str(args.config))
        else:
            config = parse_config("", "<flags>", overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run_experiment(config)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    csv_path, sidecar = write_results(summary, args.out)
    print(f"wrote {len(summary.cells)} cells to {csv_path} (config: {sidecar})")
    return EXIT_OK


def read_dataset(path: Path):
    """Return ``(names, X, y)`` from a CSV with a header and a ``y`` column."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise IngestError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if "y" not in header:
        raise IngestError("no response column named 'y'")
    if len(set(header)) != len(header):
        raise IngestError("duplicate column names in header")
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if not body:
        raise IngestError("no data rows")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestError(f"line {i}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan"):
                raise IngestError(f"line {i}, column {header[j]!r}: missing value")
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise IngestError(f"line {i}, column {header[j]!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(values[i - 2, j]):
                raise IngestError(f"line {i}, column {header[j]!r}: non-finite value {cell!r}")
    yi = header.index("y")
    names = [h for j, h in enumerate(header) if j != yi]
    if not names:
        raise IngestError("no predictor columns besides 'y'")
    X = np.delete(values, yi, axis=1)
    return names, X, values[:, yi]


def analyze(names, X, y, procedure: str, alpha: float, variance: str = "estimated", center: bool = False) -> dict:
    """Run one selection procedure on a dataset; returns a JSON-ready dict."""
    procedure = procedure.lower()
    if procedure not in MEAN_PROCEDURES and procedure not in PAIRED_PROCEDURES:
        raise ValueError(f"unknown procedure {procedure!r}")
    if center:
        X = X - X.mean(axis=0)
        y = y - y.mean()
    data = RegressionData.standardized(X, y)
    beta, eta2, nu = ols_fit(data)
    A = data.gram()
    if variance == "known":
        p = coefficient_pvalues(beta, A)
        dist = CHISQ1
    else:
        p = coefficient_pvalues(beta, A, eta2, nu)
        dist = DistributionKind(nu)
    if procedure in MEAN_PROCEDURES:
        sigma = normalize_to_correlation(np.linalg.inv(A))
        selected = run_procedure(procedure, p, tau_profile(sigma), alpha, dist).rejected
        extra = {}
    else:
        if data.n < 2 * data.d:
            raise _ShapeError(f"procedure {procedure!r} needs n >= 2d, got n={data.n}, d={data.d}")
        aug = construct_knockoffs(data)
        pair = fission(data, aug)
        pp = paired_pvalues(pair, aug, variance)
        profile = beta1_profile(pair) if procedure.startswith("sbbh") else None
        selected = run_paired_procedure(procedure, pp, alpha, profile, knockoff_statistics(data, aug))
        extra = {"p1": pp.p1, "p2": pp.p2}
    rows = []
    for j in sorted(int(i) for i in selected):
        row = {"name": names[j], "p_value": float(p[j])}
        for key, vec in extra.items():
            row[key] = float(vec[j])
        rows.append(row)
    return {"procedure": procedure, "alpha": alpha, "variance": variance, "n": data.n, "d": data.d,
            "selected": rows}


def _cmd_analyze(args) -> int:
    try:
        names, X, y = read_dataset(args.data)
    except IngestError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    try:
        result = analyze(names, X, y, args.procedure, args.alpha, args.variance, args.center)
    except _ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except np.linalg.LinAlgError as exc:
        print(f"rank deficiency: {exc}", file=sys.stderr)
        return EXIT_RANK
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{result['procedure']} at alpha={result['alpha']:g}: {len(result['selected'])} of {result['d']} selected")
    for row in result["selected"]:
        print(f"{row['name']}\t{row['p_value']:.6g}")
    if args.json_out is not None:
        args.json_out.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_check(args) -> int:
    from .checks import format_table, run_checks

    results = run_checks(quick=args.quick)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    return args.handler(args)


__all__ = ["main", "build_parser", "analyze", "read_dataset", "IngestError", "config_to_dict"]
