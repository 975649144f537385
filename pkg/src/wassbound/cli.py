"""`bound` command: run one experiment and write its result rows as CSV."""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .couplings import CRN, INDEPENDENT, REFLECTION
from .errors import InvalidInputError
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment, write_rows


def _int_list(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("dimensions must be positive integers")
    return vals


def _float_list(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("grid values must be positive")
    return vals


def _step(text):
    if text == "default":
        return None
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("step must be a positive number or 'default'")
    if not v > 0:
        raise argparse.ArgumentTypeError("step must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bound",
        description="Coupling-based Wasserstein bounds: run an experiment and emit CSV rows.",
    )
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--dims", type=_int_list, help="comma-separated dimensions, e.g. 5,20")
    ap.add_argument("--chains", type=int, help="number of coupled chains I")
    ap.add_argument("--burnin", type=int, help="burn-in S")
    ap.add_argument("--horizon", type=int, help="trajectory length T")
    ap.add_argument("--coupling", choices=(CRN, REFLECTION, INDEPENDENT), default=CRN)
    ap.add_argument("--step", type=_step, default=None, help="step size, or 'default' for each experiment's built-in rule")
    ap.add_argument("--p", type=float, default=2.0, help="Wasserstein order")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path (default: standard output)")
    ap.add_argument("--dataset", help="logistic data CSV: label first, then covariates")
    ap.add_argument("--prior-var", type=float, default=10.0)
    ap.add_argument("--lambda-grid", type=_float_list, help="Sinkhorn lambdas in units of median cost")
    ap.add_argument("--figures", help="directory for PNG figures")
    ap.add_argument("--timings", action="store_true", help="fill the runtime_ms column")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def _config(args) -> ExperimentConfig:
    kw = dict(
        experiment=args.experiment, dims=args.dims or (), chains=args.chains, burn_in=args.burnin,
        horizon=args.horizon, coupling=args.coupling, step=args.step, p=args.p, seed=args.seed,
        dataset=args.dataset, prior_var=args.prior_var,
    )
    if args.lambda_grid:
        kw["lambda_grid"] = args.lambda_grid
    if args.seed < 0:
        raise InvalidInputError("seed must be nonnegative")
    if args.dataset and not Path(args.dataset).is_file():
        raise InvalidInputError(f"dataset not found: {args.dataset}")
    return ExperimentConfig(**kw).resolved()


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
    except InvalidInputError as exc:
        parser.print_usage(sys.stderr)
        print(f"bound: error: {exc}", file=sys.stderr)
        return 2

    log = sys.stdout if args.out else sys.stderr
    rows, failure = [], None
    try:
        for row in run_experiment(cfg):
            rows.append(row)
            print(row.summary(), file=log, flush=True)
    except Exception as exc:  # partial rows are still written below
        failure = exc

    text = write_rows(rows, cfg, __version__, args.timings)
    if args.out:
        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.figures and rows:
        try:
            from .plotting import render

            for path in render(cfg.experiment, rows, args.figures):
                print(f"figure {path}", file=log)
        except Exception as exc:
            failure = failure or exc
    if failure is not None:
        print(f"bound: failed after {len(rows)} rows: {type(failure).__name__}: {failure}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
