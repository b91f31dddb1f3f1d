import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppls.canonical import canonicalize, enforce_constraint
from ppls.estimation import FitConfig
from ppls.metrics import (
    GridCell,
    GridResult,
    bic_grid,
    contribution_ratios,
    grid_to_csv,
    grid_to_json,
    r_squared,
    select_best,
)
from ppls.model import LatentDims
from ppls.simulate import random_canonical_params, sample


def _omega_params(omega2, p_x=3):
    """Canonical parameters whose W_bar_yu^T W_bar_yu has eigenvalues ``omega2``.

    W_bar_yu = Q diag(sqrt(omega2)) with orthonormal Q; all rows must share
    one norm, so Q is a scaled Hadamard-like basis.
    """
    k = len(omega2)
    H = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2) if k == 2 else np.ones((1, 1))
    W_yu = H * np.sqrt(omega2)
    # equal row norms: sum(omega2)/k each
    c = np.sqrt(np.sum(omega2) / k)
    W_xu = np.full((p_x, k), c / np.sqrt(k))
    return enforce_constraint(W_xu, np.zeros((p_x, 0)), W_yu, c)


def test_single_axis_ratios():
    rep = contribution_ratios(_omega_params([2.0]))
    np.testing.assert_allclose(rep.p_ratio, [1.0])
    np.testing.assert_allclose(rep.c_ratio, [1.0])


def test_four_to_one_ratios():
    p = _omega_params([4.0, 1.0])
    rep = contribution_ratios(canonicalize(p))
    np.testing.assert_allclose(rep.omega2, [4.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(rep.p_ratio, [0.8, 0.2], atol=1e-12)
    np.testing.assert_allclose(rep.c_ratio, [0.8, 1.0], atol=1e-12)
    assert rep.percent_labels() == ["80.0%", "20.0%"]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ratio_identities(seed):
    rng = np.random.default_rng(seed)
    p_y = int(rng.integers(1, 4))
    p_u = int(rng.integers(1, p_y + 1))
    form = random_canonical_params(5, p_y, LatentDims(p_u, 2), c=rng.uniform(0.5, 3), seed=rng)
    for sub in ("shared", "unshared"):
        rep = contribution_ratios(form, sub)
        assert rep.p_ratio.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(rep.c_ratio) >= -1e-15) and rep.c_ratio[-1] == 1.0
    p = form.params
    wbar = p.W_yu / np.sqrt(p.psi_y)[:, None]
    rep = contribution_ratios(form)
    assert np.trace(wbar @ wbar.T) == pytest.approx(rep.omega2.sum(), abs=1e-10)


def test_ratio_errors():
    p = _omega_params([4.0, 1.0])
    with pytest.raises(ValueError):
        contribution_ratios(p, "unshared")
    with pytest.raises(ValueError):
        contribution_ratios(p, "bogus")


def test_r_squared():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((30, 2))
    np.testing.assert_allclose(r_squared(y, y), [1.0, 1.0])
    np.testing.assert_allclose(r_squared(y, np.broadcast_to(y.mean(0), y.shape)), [0.0, 0.0],
                               atol=1e-15)
    pred = y + 0.1 * rng.standard_normal(y.shape)
    ref = 1 - ((y - pred) ** 2).sum(0) / ((y - y.mean(0)) ** 2).sum(0)
    np.testing.assert_allclose(r_squared(y, pred), ref, atol=1e-14)


def test_r_squared_skips_missing_and_flags_constant():
    y = np.array([[1.0], [2.0], [np.nan], [4.0]])
    pred = np.array([[1.0], [2.0], [100.0], [4.0]])
    assert r_squared(y, pred)[0] == 1.0
    with pytest.warns(RuntimeWarning):
        assert np.isnan(r_squared(np.ones((4, 1)), np.ones((4, 1)))[0])
    with pytest.raises(ValueError):
        r_squared(np.ones((4, 1)), np.ones((3, 1)))


def _cell(pu, pv, bic, ident=True, conv=True, err=""):
    return GridCell(LatentDims(pu, pv), -bic / 2, bic, 1, ident, conv, err)


def test_select_best_rules():
    only = _cell(1, 0, 10.0)
    assert select_best([only]) is only
    cells = [_cell(1, 1, 5.0), _cell(2, 0, 5.0), _cell(3, 1, 1.0, ident=False),
             _cell(2, 2, 0.5, conv=False), _cell(1, 2, np.nan, err="boom")]
    # ties go to fewer latent dimensions, then smaller p_u
    assert select_best(cells).dims == LatentDims(1, 1)
    assert select_best([_cell(3, 1, 1.0, ident=False)]) is None


def test_grid_flags_and_selects():
    truth = random_canonical_params(5, 3, LatentDims(2, 1), c=2.0, seed=1, min_gap=0.1)
    d = sample(truth.params, 1500, 2)
    grid = bic_grid(d, range(1, 5), range(0, 3), FitConfig(LatentDims(1, 0), n_restarts=2))
    for cell in grid.cells:
        assert cell.identifiable == (cell.dims.p_u <= 3)
    assert grid.best.dims == LatentDims(2, 1)
    table = grid.table()
    assert table.shape == (4, 3)
    assert table[1, 1] == pytest.approx(grid.best.bic)
    rows = grid_to_csv(grid).strip().splitlines()
    assert rows[0] == "p_u,p_v,loglik,n_params,bic,identifiable,converged"
    assert len(rows) == 13
    doc = json.loads(grid_to_json(grid))
    assert doc["best"] == {"p_u": 2, "p_v": 1}


def test_grid_json_maps_failures_to_null():
    grid = GridResult([_cell(1, 0, 3.0), _cell(1, 1, np.nan, conv=False, err="boom")], None)
    doc = json.loads(grid_to_json(grid))
    assert doc["cells"][1]["bic"] is None and doc["best"] is None
