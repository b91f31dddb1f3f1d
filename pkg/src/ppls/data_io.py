"""
CSV ingestion and the preprocessing switches applied before fitting.

Files are RFC-4180 CSV with a header row; an empty field or the token
``NaN`` marks a missing entry.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, fmt
from .estimation import DataError, Dataset

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "nan", "NaN", "NAN"})


@dataclass
class Table:
    names: list
    values: np.ndarray


@dataclass
class IngestReport:
    """What preprocessing did to the raw tables."""

    dropped_x_columns: list = field(default_factory=list)
    dropped_rows: int = 0
    x_missing_rate: dict = field(default_factory=dict)
    y_missing_rate: dict = field(default_factory=dict)


def read_table(path, columns=None):
    """Read a numeric CSV into an array with NaN for missing entries.

    Parameters
    ----------
    path : str or file-like
    columns : sequence of str, optional
        Keep only these columns, in this order.

    Raises
    ------
    DataError
        On a missing header, ragged rows, unknown columns or a cell that
        is neither a number nor a missing token (reported with its 1-based
        file line and column name).
    """
    fh = open(path, newline="", encoding="utf-8") if isinstance(path, str) else path
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {line} has {len(row)} fields, "
                                f"header has {len(header)}")
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: line {line}, column {name!r}: "
                                    f"non-numeric value {cell!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}: line {line}, column {name!r}: "
                                    f"non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
    finally:
        if isinstance(path, str):
            fh.close()
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if columns is not None:
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: unknown columns {missing}")
        idx = [header.index(c) for c in columns]
        return Table(list(columns), values[:, idx])
    return Table(header, values)


def binarize(x):
    """Map every nonzero entry to 1, keeping NaN."""
    out = (x != 0).astype(float)
    out[np.isnan(x)] = np.nan
    return out


def rate_filter(x, names, rate_min):
    """Drop binary columns whose observed rate of ones is below ``rate_min`` or above ``1 - rate_min``."""
    with np.errstate(invalid="ignore"):
        rates = np.nanmean(x, axis=0) if x.shape[0] else np.full(x.shape[1], np.nan)
    keep = (rates >= rate_min) & (rates <= 1.0 - rate_min)
    dropped = [n for n, k in zip(names, keep) if not k]
    for n, r in zip(names, rates):
        if n in dropped:
            logger.info("dropping x column %r: rate %.4g outside [%g, %g]",
                        n, r, rate_min, 1 - rate_min)
    return x[:, keep], [n for n, k in zip(names, keep) if k], dropped


def log_transform(y):
    """Natural log of observed entries; every observed entry must be positive."""
    bad = np.flatnonzero(np.any(y <= 0, axis=1))
    if bad.size:
        shown = ", ".join(str(i + 1) for i in bad[:20])
        more = "" if bad.size <= 20 else f" and {bad.size - 20} more"
        raise DataError(f"log transform needs positive y; offending data rows: {shown}{more}")
    return np.log(y)


def missing_rates(a, names):
    if a.shape[0] == 0:
        return {n: float("nan") for n in names}
    return {n: float(r) for n, r in zip(names, np.isnan(a).mean(axis=0))}


def ingest(x_path, y_path=None, y_columns=None, binarize_x=False, rate_min=0.1,
           log_y=False, require_y=False, weight_column=None):
    """Load and preprocess explanatory and objective variables.

    Either ``y_path`` names a second CSV, or ``y_columns`` picks the
    objective columns out of ``x_path`` (the rest become inputs).  In
    order and only when enabled: nonzero x entries become 1, binary x
    columns with rates outside ``[rate_min, 1 - rate_min]`` are dropped
    (only together with ``binarize_x``), y is log-transformed, and rows
    with every y missing are dropped.

    Returns
    -------
    data : Dataset
    report : IngestReport
    """
    if (y_path is None) == (y_columns is None):
        raise DataError("give exactly one of y_path and y_columns")
    xt = read_table(x_path)
    weights = None
    if weight_column is not None:
        if weight_column not in xt.names:
            raise DataError(f"weight column {weight_column!r} not found")
        j = xt.names.index(weight_column)
        weights = xt.values[:, j]
        xt = Table(xt.names[:j] + xt.names[j + 1:], np.delete(xt.values, j, axis=1))
        if np.isnan(weights).any() or np.any(weights <= 0):
            raise DataError("weights must be present and positive in every row")
    if y_path is not None:
        yt = read_table(y_path)
        if yt.values.shape[0] != xt.values.shape[0]:
            raise DataError(f"x has {xt.values.shape[0]} rows but y has {yt.values.shape[0]}")
    else:
        yt = read_table(x_path, list(y_columns))
        keep = [j for j, n in enumerate(xt.names) if n not in set(y_columns)]
        xt = Table([xt.names[j] for j in keep], xt.values[:, keep])

    report = IngestReport()
    x, x_names, y = xt.values, xt.names, yt.values
    if binarize_x:
        x = binarize(x)
        if rate_min:
            x, x_names, report.dropped_x_columns = rate_filter(x, x_names, rate_min)
    if log_y:
        y = log_transform(y)
    if require_y:
        keep = ~np.isnan(y).all(axis=1)
        report.dropped_rows = int((~keep).sum())
        x, y = x[keep], y[keep]
        weights = None if weights is None else weights[keep]
    if x.shape[1] == 0:
        raise DataError("no explanatory columns left after preprocessing")
    report.x_missing_rate = missing_rates(x, x_names)
    report.y_missing_rate = missing_rates(y, yt.names)
    for n, r in {**report.x_missing_rate, **report.y_missing_rate}.items():
        logger.info("missing rate %-20s %.4f", n, r)
    data = Dataset.from_arrays(x, y, weights, x_names, yt.names)
    return data, report


def table_to_csv(names, values):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for row in np.atleast_2d(values):
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_table(path, names, values):
    atomic_write_text(path, table_to_csv(names, values))


__all__ = [
    "Table",
    "IngestReport",
    "read_table",
    "binarize",
    "rate_filter",
    "log_transform",
    "missing_rates",
    "ingest",
    "table_to_csv",
    "write_table",
]
