"""
Command-line interface.

Subcommands: ``fit``, ``select``, ``predict``, ``scores``, ``simulate``
and ``biplot``.  Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from ._io import atomic_write_text, fmt, jsonable
from .canonical import ConstraintError, canonicalize, h_from_c
from .data_io import DataError, binarize, ingest, log_transform, read_table, write_table
from .estimation import FitConfig, FitError, fit
from .gaussian import SingularCovarianceError
from .metrics import bic_grid, contribution_ratios, write_grid
from .model import (
    LatentDims,
    factor_scores,
    load_params,
    predict_y,
    save_params,
)
from .simulate import random_canonical_params, run_sampling_study, sample, write_study

logger = logging.getLogger("ppls")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CORE_KEYS = frozenset({"p_x", "p_y", "p_u", "p_v", "mu_x", "mu_y", "W_xu", "W_xv", "W_yu",
                       "psi_x", "psi_y", "c", "canonical"})


class UsageError(Exception):
    pass

    """Requested worker count (at least 1), capped by ``PPLS_THREADS`` when set."""
def max_jobs(requested):
    """Requested worker count capped by ``PPLS_THREADS`` (default 1)."""
    cap = os.environ.get("PPLS_THREADS")
    if cap is None:
        return max(1, requested)
    try:
        cap = int(cap)
    except ValueError:
        raise UsageError(f"PPLS_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(requested, cap))


# --------------------------------------------------------------------------
# argument helpers
# --------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_data_args(p, need_y=True):
    p.add_argument("--x", required=True, help="CSV of explanatory variables")
    g = p.add_mutually_exclusive_group(required=need_y)
    g.add_argument("--y", help="CSV of objective variables")
    g.add_argument("--y-cols", help="comma-separated objective columns inside the --x file")
    p.add_argument("--binarize", action="store_true", help="map nonzero x entries to 1")
    p.add_argument("--rate-min", type=float, default=0.1,
                   help="with --binarize, drop x columns with rate outside [r, 1-r] (default 0.1)")
    p.add_argument("--log-y", action="store_true", help="natural log of y (must be positive)")
    p.add_argument("--require-y", action="store_true", help="drop rows with every y missing")
    p.add_argument("--weight-col", help="column of positive row weights in the --x file")


def _add_fit_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-8, help="relative log-likelihood tolerance")
    p.add_argument("--max-iters", type=int, default=2000)


def _config(args, dims):
    return FitConfig(dims, max_iters=args.max_iters, rel_tol=args.tol,
                     n_restarts=args.restarts, seed=args.seed)


def _load_data(args):
    y_cols = args.y_cols.split(",") if getattr(args, "y_cols", None) else None
    data, report = ingest(args.x, y_path=args.y, y_columns=y_cols, binarize_x=args.binarize,
                          rate_min=args.rate_min, log_y=args.log_y, require_y=args.require_y,
                          weight_column=args.weight_col)
    return data, report


def _preprocessing(args, data):
    return {"x_names": list(data.x_names), "y_names": list(data.y_names),
            "binarize": bool(args.binarize), "log_y": bool(args.log_y)}


def model_extras(doc):
    """Non-parameter entries of a model document (names, preprocessing, fit summary)."""
    return {k: v for k, v in doc.items() if k not in CORE_KEYS}


def _save_model(path, result, extra):
    canonical = result.canonical is not None
    extra = dict(extra)
    if canonical:
        extra["omega2_yu"] = result.canonical.omega2_yu.tolist()
        extra["omega2_xv"] = result.canonical.omega2_xv.tolist()
    save_params(path, result.params, canonical=canonical, extra=jsonable(extra))


def _report(result):
    return {"loglik": result.loglik, "bic": result.bic, "n_params": result.n_params,
            "iterations": result.iterations, "converged": result.converged,
            "identifiable": result.identifiable, "n_obs": result.n_obs,
            "restart_logliks": result.restart_logliks}


def _sibling(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def _model_inputs(args, doc, p_x):
    """Read ``--x`` for a fitted model, applying the model's x preprocessing."""
    names = doc.get("x_names") or None
    table = read_table(args.x, names)
    x = table.values
    if x.shape[1] != p_x:
        raise DataError(f"{args.x}: model expects {p_x} explanatory columns, found {x.shape[1]}")
    if doc.get("binarize"):
        x = binarize(x)
    return x


def _model_targets(path, doc, p_y):
    names = doc.get("y_names") or None
    y = read_table(path, names).values
    if y.shape[1] != p_y:
        raise DataError(f"{path}: model expects {p_y} objective columns, found {y.shape[1]}")
    return log_transform(y) if doc.get("log_y") else y


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_fit(args):
    data, _ = _load_data(args)
    dims = LatentDims(args.pu, args.pv)
    result = fit(data, _config(args, dims))
    report = _report(result)
    _save_model(args.out, result, {**_preprocessing(args, data), "fit": report})
    report_path = args.report or _sibling(args.out, "_report.json")
    atomic_write_text(report_path, json.dumps(jsonable(report), indent=2) + "\n")
    print(f"loglik {result.loglik:.6f}  bic {result.bic:.6f}  iterations {result.iterations}  "
          f"converged {result.converged}")
    if not result.converged:
        logger.warning("optimizer stopped at --max-iters before meeting --tol")
    return EXIT_OK


def cmd_select(args):
    data, _ = _load_data(args)
    os.makedirs(args.out, exist_ok=True)
    config = _config(args, LatentDims(1, 0))
    grid = bic_grid(data, range(1, args.pu_max + 1), range(0, args.pv_max + 1), config,
                    n_jobs=max_jobs(args.jobs))
    write_grid(grid, os.path.join(args.out, "grid.csv"), os.path.join(args.out, "grid.json"))
    for cell in grid.cells:
        flag = "" if cell.identifiable else "  (not identifiable)"
        print(f"p_u={cell.dims.p_u} p_v={cell.dims.p_v}  bic {cell.bic:.4f}{flag}")
    if grid.best is None:
        logger.error("no usable cell in the grid")
        return EXIT_NUMERIC
    best = grid.best
    _save_model(os.path.join(args.out, "model.json"), best.result,
                {**_preprocessing(args, data), "fit": _report(best.result)})
    print(f"best p_u={best.dims.p_u} p_v={best.dims.p_v}")
    return EXIT_OK


def cmd_predict(args):
    params, doc = load_params(args.model)
    x = _model_inputs(args, doc, params.p_x)
    means, covs = predict_y(params, x)
    names = doc.get("y_names") or [f"y{j + 1}" for j in range(params.p_y)]
    var = np.diagonal(covs, axis1=1, axis2=2)
    header = [f"mean_{n}" for n in names] + [f"var_{n}" for n in names]
    write_table(args.out, header, np.hstack([means, var]))
    return EXIT_OK


def cmd_scores(args):
    params, doc = load_params(args.model)
    x = _model_inputs(args, doc, params.p_x)
    y = None
    if args.y:
        y = _model_targets(args.y, doc, params.p_y)
        if y.shape[0] != x.shape[0]:
            raise DataError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    elif args.with_y_scores:
        raise UsageError("--with-y-scores needs --y")
    fs = factor_scores(params, x, y, with_y_scores=args.with_y_scores)
    q = params.p_u + params.p_v
    axes = [f"u{j + 1}" for j in range(params.p_u)] + [f"v{j + 1}" for j in range(params.p_v)]
    blocks, header = [], []
    for label, m in (("xy", fs.m_xy), ("x", fs.m_x), ("y", fs.m_y)):
        if m is not None:
            blocks.append(m.reshape(-1, q))
            header += [f"m_{label}_{a}" for a in axes]
    write_table(args.out, header, np.hstack(blocks))
    return EXIT_OK


def cmd_simulate(args):
    if args.model:
        params, _ = load_params(args.model)
        truth = canonicalize(params, warn=False)
    else:
        if None in (args.px, args.py, args.pu):
            raise UsageError("give --model or all of --px, --py, --pu")
        truth = random_canonical_params(args.px, args.py, LatentDims(args.pu, args.pv),
                                        c=args.c, seed=args.seed, min_gap=args.min_gap)
    params = truth.params
    os.makedirs(args.out, exist_ok=True)
    save_params(os.path.join(args.out, "truth.json"), params, canonical=True)
    if args.sizes:
        config = _config(args, params.dims)
        study = run_sampling_study(truth, args.sizes, args.replicates, config, seed=args.seed,
                                   n_jobs=max_jobs(args.jobs))
        write_study(study, os.path.join(args.out, "estimates.csv"),
                    os.path.join(args.out, "summary.json"))
        print(f"study done; failed fits per size: {study.n_failed}")
        return EXIT_OK
    data = sample(params, args.n, args.seed, missing_frac=args.missing_frac,
                  missing_block=args.missing_block)
    write_table(os.path.join(args.out, "x.csv"),
                [f"x{j + 1}" for j in range(params.p_x)], data.x)
    write_table(os.path.join(args.out, "y.csv"),
                [f"y{j + 1}" for j in range(params.p_y)], data.y)
    return EXIT_OK


def biplot_export(params, scores, axes=(0, 1)):
    """Scores, loading arrows and axis labels for a pair of latent axes.

    Arrows are rows of ``W_hat = diag(Sigma)^{-1/2} W`` restricted to the
    pair, so none is longer than ``h``, the radius of the reference
    circle.  Axis labels give each axis's contribution ratio within its
    subspace.
    """
    q = params.p_u + params.p_v
    a, b = axes
    if not (0 <= a < q and 0 <= b < q) or a == b:
        raise UsageError(f"axes must be two distinct indices in [0, {q})")
    sd = np.sqrt(params.psi + np.sum(params.W**2, axis=1))
    arrows = (params.W / sd[:, None])[:, [a, b]]
    labels = []
    shared = contribution_ratios(params, "shared").percent_labels()
    unshared = contribution_ratios(params, "unshared").percent_labels() if params.p_v else []
    for k in (a, b):
        if k < params.p_u:
            labels.append(shared[k])
        else:
            labels.append(unshared[k - params.p_u])
    return {"scores": scores[:, [a, b]], "arrows": arrows, "axis_labels": labels,
            "unit_circle_radius": h_from_c(params.c)}


def cmd_biplot(args):
    params, doc = load_params(args.model)
    x = _model_inputs(args, doc, params.p_x)
    y = _model_targets(args.y, doc, params.p_y) if args.y else None
    fs = factor_scores(params, x, y)
    scores = (fs.m_xy if y is not None else fs.m_x).reshape(x.shape[0], -1)
    export = biplot_export(params, scores, tuple(args.axes))
    os.makedirs(args.out, exist_ok=True)
    q_names = [f"u{j + 1}" for j in range(params.p_u)] + [f"v{j + 1}" for j in range(params.p_v)]
    pair = [q_names[k] for k in args.axes]
    write_table(os.path.join(args.out, "scores.csv"), pair, export["scores"])
    features = (doc.get("x_names") or [f"x{j + 1}" for j in range(params.p_x)]) + \
               (doc.get("y_names") or [f"y{j + 1}" for j in range(params.p_y)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature"] + pair)
    for name, row in zip(features, export["arrows"]):
        w.writerow([name, fmt(row[0]), fmt(row[1])])
    atomic_write_text(os.path.join(args.out, "arrows.csv"), buf.getvalue())
    meta = {"axes": pair, "axis_labels": export["axis_labels"],
            "unit_circle_radius": export["unit_circle_radius"],
            "score_source": "m_xy" if y is not None else "m_x"}
    atomic_write_text(os.path.join(args.out, "biplot.json"),
                      json.dumps(jsonable(meta), indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="ppls", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one model")
    _add_data_args(p)
    _add_fit_args(p)
    p.add_argument("--pu", type=int, required=True)
    p.add_argument("--pv", type=int, default=0)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--report", help="fit report path (default: <out>_report.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="BIC grid over (p_u, p_v)")
    _add_data_args(p)
    _add_fit_args(p)
    p.add_argument("--pu-max", type=int, required=True)
    p.add_argument("--pv-max", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("predict", help="predictive mean and variance of y given x")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("scores", help="factor scores per row")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y")
    p.add_argument("--with-y-scores", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("simulate", help="synthetic data or a sampling study")
    p.add_argument("--model", help="truth model JSON (otherwise a random canonical truth)")
    p.add_argument("--px", type=int)
    p.add_argument("--py", type=int)
    p.add_argument("--pu", type=int)
    p.add_argument("--pv", type=int, default=0)
    p.add_argument("--c", type=float, default=1.5)
    p.add_argument("--min-gap", type=float, default=0.0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--missing-frac", type=float, default=0.0)
    p.add_argument("--missing-block", choices=("x", "y", "both"), default="x")
    p.add_argument("--sizes", type=_int_list, help="run a sampling study at these sizes")
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)
    _add_fit_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("biplot", help="export biplot data")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", help="use m^(x,y) scores instead of m^(x)")
    p.add_argument("--axes", type=_int_list, default=[0, 1],
                   help="two latent axis indices, shared axes first (default 0,1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_biplot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ppls: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"ppls: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, ConstraintError, SingularCovarianceError, np.linalg.LinAlgError) as exc:
        print(f"ppls: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ppls: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
