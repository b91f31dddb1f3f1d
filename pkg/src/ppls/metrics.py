"""
Model quality and interpretation: contribution ratios, R^2, BIC grids.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text, fmt, jsonable
from .canonical import CanonicalForm, check_identifiability
from .estimation import FitConfig, FitError, fit, sample_moments
from .model import LatentDims

logger = logging.getLogger(__name__)

BIC_TIE_TOL = 1e-6


@dataclass(frozen=True)
class ContributionReport:
    """Per-axis share of the noise-scaled variance explained by a latent subspace.

    ``omega2`` are the descending eigenvalues of ``W_bar^T W_bar`` for the
    block in question (``W_bar = Psi^{-1/2} W``), ``p_ratio`` their shares
    and ``c_ratio`` the cumulative shares.
    """

    omega2: np.ndarray
    p_ratio: np.ndarray
    c_ratio: np.ndarray

    def percent_labels(self, decimals=1):
        return [f"{100 * p:.{decimals}f}%" for p in self.p_ratio]


def contribution_ratios(canonical, subspace="shared"):
    """Contribution ratios of the shared (``W_bar_yu``) or input-specific (``W_bar_xv``) axes.

    For the shared subspace these rank the latent axes by how much of the
    variance of ``Psi_y^{-1/2} (W_yu u)`` each one carries.
    """
    params = canonical.params if isinstance(canonical, CanonicalForm) else canonical
    if subspace == "shared":
        block = params.W_yu / np.sqrt(params.psi_y)[:, None]
    elif subspace == "unshared":
        block = params.W_xv / np.sqrt(params.psi_x)[:, None]
    else:
        raise ValueError("subspace must be 'shared' or 'unshared'")
    if block.shape[1] == 0:
        raise ValueError(f"the {subspace} subspace is empty")
    omega2 = np.sort(np.clip(np.linalg.eigvalsh(block.T @ block), 0.0, None))[::-1]
    total = omega2.sum()
    if not total > 0:
        raise ValueError("all loading eigenvalues are zero; no signal to apportion")
    p_ratio = omega2 / total
    c_ratio = np.cumsum(omega2) / total
    c_ratio[-1] = 1.0
    return ContributionReport(omega2, p_ratio, c_ratio)


def r_squared(y_true, y_pred):
    """Coefficient of determination per objective variable.

    Computed over the rows where ``y_true`` is observed (non-NaN).  A
    column with zero variance yields NaN with a warning.
    """
    y_true = np.array(y_true, dtype=float, ndmin=2)
    y_pred = np.array(y_pred, dtype=float, ndmin=2)
    if y_true.shape[0] == 1 and y_true.shape[1] > 1 and y_pred.shape == y_true.shape[::-1]:
        y_pred = y_pred.T
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    out = np.empty(y_true.shape[1])
    for j in range(y_true.shape[1]):
        obs = ~np.isnan(y_true[:, j])
        if obs.sum() < 2:
            raise ValueError(f"column {j} has fewer than two observed values")
        yt, yp = y_true[obs, j], y_pred[obs, j]
        ss_tot = np.sum((yt - yt.mean()) ** 2)
        if ss_tot == 0:
            warnings.warn(f"column {j} has zero variance; R^2 undefined", RuntimeWarning,
                          stacklevel=2)
            out[j] = np.nan
            continue
        out[j] = 1.0 - np.sum((yt - yp) ** 2) / ss_tot
    return out


# --------------------------------------------------------------------------
# BIC grid
# --------------------------------------------------------------------------


@dataclass
class GridCell:
    dims: LatentDims
    loglik: float
    bic: float
    n_params: int
    identifiable: bool
    converged: bool
    error: str = ""
    result: object = None

    @property
    def usable(self):
        return self.identifiable and self.converged and not self.error and np.isfinite(self.bic)


@dataclass
class GridResult:
    cells: list
    best: GridCell | None

    def table(self, field="bic"):
        """Values of ``field`` as a ``p_u x p_v`` array over the grid ranges."""
        pus = sorted({c.dims.p_u for c in self.cells})
        pvs = sorted({c.dims.p_v for c in self.cells})
        out = np.full((len(pus), len(pvs)), np.nan)
        for c in self.cells:
            out[pus.index(c.dims.p_u), pvs.index(c.dims.p_v)] = getattr(c, field)
        return out


def select_best(cells):
    """BIC-minimizing usable cell; near-ties go to fewer latent dimensions, then smaller ``p_u``."""
    usable = [c for c in cells if c.usable]
    if not usable:
        return None
    low = min(c.bic for c in usable)
    near = [c for c in usable if c.bic - low <= BIC_TIE_TOL * max(1.0, abs(low))]
    return min(near, key=lambda c: (c.dims.q, c.dims.p_u))


def _fit_cell(data, config, moments):
    ident = check_identifiability(data.p_x, data.p_y, config.dims)
    try:
        res = fit(data, config, moments=moments)
    except (FitError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("cell %s failed: %s", config.dims, exc)
        return GridCell(config.dims, np.nan, np.nan, 0, bool(ident), False, error=str(exc))
    return GridCell(config.dims, res.loglik, res.bic, res.n_params, res.identifiable,
                    res.converged, result=res)


def bic_grid(data, p_u_range, p_v_range, config, n_jobs=1, keep_results=True):
    """Fit every ``(p_u, p_v)`` cell and pick the BIC minimum.

    Non-identifiable cells are fitted anyway (the likelihood surface is of
    interest) but flagged and never selected; neither are cells whose fit
    did not converge or failed.
    """
    p_u_range, p_v_range = list(p_u_range), list(p_v_range)
    if not p_u_range or not p_v_range:
        raise ValueError("grid ranges must be nonempty")
    moments = sample_moments(data)
    configs = [dataclasses.replace(config, dims=LatentDims(pu, pv), allow_nonidentifiable=True)
               for pu in p_u_range for pv in p_v_range]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            cells = list(pool.map(_fit_cell, [data] * len(configs), configs,
                                  [moments] * len(configs)))
    else:
        cells = [_fit_cell(data, cfg, moments) for cfg in configs]
    if not keep_results:
        for c in cells:
            c.result = None
    return GridResult(cells, select_best(cells))


GRID_COLUMNS = ("p_u", "p_v", "loglik", "n_params", "bic", "identifiable", "converged")


def grid_to_csv(grid):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GRID_COLUMNS)
    for c in grid.cells:
        w.writerow([c.dims.p_u, c.dims.p_v, fmt(c.loglik), c.n_params, fmt(c.bic),
                    str(c.identifiable).lower(), str(c.converged).lower()])
    return buf.getvalue()


def grid_to_json(grid):
    def cell(c):
        return {"p_u": c.dims.p_u, "p_v": c.dims.p_v, "loglik": c.loglik,
                "n_params": c.n_params, "bic": c.bic, "identifiable": c.identifiable,
                "converged": c.converged, "error": c.error}

    best = None if grid.best is None else {"p_u": grid.best.dims.p_u, "p_v": grid.best.dims.p_v}
    return json.dumps(jsonable({"cells": [cell(c) for c in grid.cells], "best": best}), indent=2)


def write_grid(grid, csv_path=None, json_path=None):
    if csv_path:
        atomic_write_text(csv_path, grid_to_csv(grid))
    if json_path:
        atomic_write_text(json_path, grid_to_json(grid) + "\n")


__all__ = [
    "ContributionReport",
    "contribution_ratios",
    "r_squared",
    "GridCell",
    "GridResult",
    "select_best",
    "bic_grid",
    "grid_to_csv",
    "grid_to_json",
    "write_grid",
]
