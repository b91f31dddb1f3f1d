"""
Parameters and closed-form distributions of probabilistic PLS regression.

Generative model (latent means fixed at zero, latent covariances at I)::

    u ~ N(0, I_pu),  v ~ N(0, I_pv)
    x | u, v ~ N(mu_x + W_xu u + W_xv v, diag(psi_x))
    y | u    ~ N(mu_y + W_yu u,          diag(psi_y))

so that ``[x; y] ~ N([mu_x; mu_y], Psi + W W^T)`` with the block loading
matrix ``W = [[W_xu, W_xv], [W_yu, 0]]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gaussian import (
    ConditionalRows,
    GaussianDist,
    SingularCovarianceError,
    cholesky,
    condition,
    symmetrize,
)


@dataclass(frozen=True)
class LatentDims:
    """Shared (``p_u``) and input-specific (``p_v``) latent dimensions."""

    p_u: int
    p_v: int = 0

    def __post_init__(self):
        if int(self.p_u) != self.p_u or self.p_u < 1:
            raise ValueError(f"p_u must be a positive integer, got {self.p_u}")
        if int(self.p_v) != self.p_v or self.p_v < 0:
            raise ValueError(f"p_v must be a nonnegative integer, got {self.p_v}")
        object.__setattr__(self, "p_u", int(self.p_u))
        object.__setattr__(self, "p_v", int(self.p_v))

    @property
    def q(self):
        return self.p_u + self.p_v


def _frozen(a, ndim):
    a = np.array(a, dtype=float, ndmin=ndim)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PlsParams:
    """Full parameter set of the model.

    ``psi_x`` and ``psi_y`` hold the diagonals of the unique variances.
    Column orthogonality of the loadings is a property of the canonical
    form (see :func:`ppls.canonical.canonicalize`), not something every
    parameter point has to satisfy.
    """

    mu_x: np.ndarray
    mu_y: np.ndarray
    W_xu: np.ndarray
    W_xv: np.ndarray
    W_yu: np.ndarray
    psi_x: np.ndarray
    psi_y: np.ndarray

    def __post_init__(self):
        mu_x = _frozen(self.mu_x, 1)
        mu_y = _frozen(self.mu_y, 1)
        p_x, p_y = mu_x.size, mu_y.size
        W_xu = _frozen(self.W_xu, 2)
        p_u = W_xu.shape[1]
        W_xv = np.asarray(self.W_xv, dtype=float)
        if W_xv.size == 0:
            W_xv = np.zeros((p_x, 0))
        W_xv = _frozen(W_xv, 2)
        W_yu = _frozen(self.W_yu, 2)
        psi_x = _frozen(self.psi_x, 1)
        psi_y = _frozen(self.psi_y, 1)
        expected = {
            "W_xu": (p_x, p_u),
            "W_xv": (p_x, W_xv.shape[1]),
            "W_yu": (p_y, p_u),
            "psi_x": (p_x,),
            "psi_y": (p_y,),
        }
        for name, arr in [("W_xu", W_xu), ("W_xv", W_xv), ("W_yu", W_yu),
                          ("psi_x", psi_x), ("psi_y", psi_y)]:
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
        if p_u < 1:
            raise ValueError("p_u must be at least 1")
        psi = np.concatenate([psi_x, psi_y])
        if not np.all(psi > 0) or not np.all(np.isfinite(psi)):
            raise ValueError(f"unique variances must be positive and finite, got {psi}")
        for name, val in [("mu_x", mu_x), ("mu_y", mu_y), ("W_xu", W_xu),
                          ("W_xv", W_xv), ("W_yu", W_yu), ("psi_x", psi_x), ("psi_y", psi_y)]:
            object.__setattr__(self, name, val)

    @property
    def p_x(self):
        return self.mu_x.size

    @property
    def p_y(self):
        return self.mu_y.size

    @property
    def p_u(self):
        return self.W_xu.shape[1]

    @property
    def p_v(self):
        return self.W_xv.shape[1]

    @property
    def dims(self):
        return LatentDims(self.p_u, self.p_v)

    @property
    def mu(self):
        return np.concatenate([self.mu_x, self.mu_y])

    @property
    def psi(self):
        return np.concatenate([self.psi_x, self.psi_y])

    @property
    def W(self):
        """Block loading matrix ``[[W_xu, W_xv], [W_yu, 0]]``."""
        return np.block([[self.W_xu, self.W_xv],
                         [self.W_yu, np.zeros((self.p_y, self.p_v))]])

    @property
    def W_x(self):
        return np.hstack([self.W_xu, self.W_xv])

    @property
    def c(self):
        """Root-mean-square row norm of ``Psi^{-1/2} W``.

        Equal to the norm-constraint level when the constraint holds.
        """
        wbar2 = np.sum(self.W**2, axis=1) / self.psi
        return float(np.sqrt(wbar2.mean()))

    def replace(self, **changes):
        fields = {k: getattr(self, k) for k in
                  ("mu_x", "mu_y", "W_xu", "W_xv", "W_yu", "psi_x", "psi_y")}
        fields.update(changes)
        return PlsParams(**fields)

    def allclose(self, other, atol=1e-12, rtol=0.0):
        return all(
            np.allclose(getattr(self, k), getattr(other, k), atol=atol, rtol=rtol)
            for k in ("mu_x", "mu_y", "W_xu", "W_xv", "W_yu", "psi_x", "psi_y")
        )


@dataclass(frozen=True)
class FactorScores:
    """Posterior means of the latent variables, one row per observation.

    Covariances are stacked per row, because with missing entries every
    missingness pattern has its own posterior covariance.
    """

    m_xy: np.ndarray | None
    m_x: np.ndarray
    cov_z_given_xy: np.ndarray | None
    cov_z_given_x: np.ndarray
    m_y: np.ndarray | None = None


# --------------------------------------------------------------------------
# joint distributions
# --------------------------------------------------------------------------


def joint_covariance(params):
    """Observed-data distribution of ``[x; y]``."""
    W = params.W
    cov = symmetrize(np.diag(params.psi) + W @ W.T)
    return GaussianDist(params.mu, cov)


def full_joint(params):
    """Joint distribution of ``(x, y, u, v)``."""
    W = params.W
    p, q = W.shape
    cov = np.zeros((p + q, p + q))
    cov[:p, :p] = np.diag(params.psi) + W @ W.T
    cov[:p, p:] = W
    cov[p:, :p] = W.T
    cov[p:, p:] = np.eye(q)
    mean = np.concatenate([params.mu, np.zeros(q)])
    return GaussianDist(mean, symmetrize(cov))


# --------------------------------------------------------------------------
# posteriors over the latent variables (precision form)
# --------------------------------------------------------------------------


def _batch(a, width, name):
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != width:
        raise ValueError(f"{name} has trailing dimension {a.shape[-1]}, expected {width}")
    return a


def _wrap(mean, cov):
    if mean.ndim == 1:
        return GaussianDist(mean, cov)
    return ConditionalRows(mean, cov)


def _posterior(W, psi, resid):
    # Sigma = [I + W^T Psi^{-1} W]^{-1},  mean = Sigma W^T Psi^{-1} r
    Wp = W / psi[:, None]
    prec = symmetrize(np.eye(W.shape[1]) + W.T @ Wp)
    chol = cholesky(prec, what="posterior precision")
    cov = symmetrize(linalg.cho_solve((chol, True), np.eye(W.shape[1])))
    mean = resid @ Wp @ cov
    return mean, cov


def posterior_z_given_xy(params, x, y):
    """``p(z | x, y)``; its mean is the factor score ``m^(x,y)``."""
    x = _batch(x, params.p_x, "x")
    y = _batch(y, params.p_y, "y")
    resid = np.concatenate([x - params.mu_x, y - params.mu_y], axis=-1)
    return _wrap(*_posterior(params.W, params.psi, resid))


def posterior_z_given_x(params, x):
    """``p(z | x)``; its mean is the factor score ``m^(x)``."""
    x = _batch(x, params.p_x, "x")
    return _wrap(*_posterior(params.W_x, params.psi_x, x - params.mu_x))


def posterior_z_given_y(params, y):
    """``p(z | y)``.  The v-block is the prior: mean 0, covariance I."""
    y = _batch(y, params.p_y, "y")
    mean_u, cov_u = _posterior(params.W_yu, params.psi_y, y - params.mu_y)
    p_u, p_v = params.p_u, params.p_v
    cov = np.zeros((p_u + p_v, p_u + p_v))
    cov[:p_u, :p_u] = cov_u
    cov[p_u:, p_u:] = np.eye(p_v)
    mean = np.concatenate([mean_u, np.zeros(mean_u.shape[:-1] + (p_v,))], axis=-1)
    return _wrap(mean, cov)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


def _u_gain(params):
    """Rows of ``Sigma_{z|x} W_x^T Psi_x^{-1}`` for u, and ``Sigma_{u|x}``.

    ``Sigma_zx Sigma_x^{-1} = Sigma_{z|x} W_x^T Psi_x^{-1}`` avoids forming
    and inverting the ``p_x``-dimensional covariance.
    """
    W_x = params.W_x
    Wp = W_x / params.psi_x[:, None]
    prec = symmetrize(np.eye(W_x.shape[1]) + W_x.T @ Wp)
    cov = symmetrize(linalg.cho_solve((cholesky(prec, what="posterior precision"), True),
                                      np.eye(W_x.shape[1])))
    gain = cov @ Wp.T
    p_u = params.p_u
    return gain[:p_u], cov[:p_u, :p_u]


def regression_coefficients(params):
    """``B_yx = W_yu W_xu^T Sigma_x^{-1}`` (rank at most ``p_u``)."""
    gain_u, _ = _u_gain(params)
    return params.W_yu @ gain_u


def predict_y_given_x(params, x):
    """Exact predictive distribution ``p(y | x)``."""
    x = _batch(x, params.p_x, "x")
    gain_u, cov_u = _u_gain(params)
    mean = params.mu_y + (x - params.mu_x) @ (params.W_yu @ gain_u).T
    cov = symmetrize(np.diag(params.psi_y) + params.W_yu @ cov_u @ params.W_yu.T)
    return _wrap(mean, cov)


def plug_in_predict(params, x):
    """``p(y | z_hat)`` with ``z_hat = m^(x)``.

    The mean coincides with :func:`predict_y_given_x`; the covariance is
    only ``Psi_y`` and therefore omits the posterior uncertainty term
    ``W_yu Sigma_{u|x} W_yu^T``.
    """
    post = posterior_z_given_x(params, x)
    u_hat = post.mean[..., : params.p_u]
    mean = params.mu_y + u_hat @ params.W_yu.T
    return _wrap(mean, np.diag(params.psi_y))


def classical_scores(params, x):
    """Classical (``Psi -> 0``) limit of the factor score ``m^(x)``.

    Projection of the standardized inputs onto the column space of the
    unit-row-norm loadings ``W_tilde_x``.
    """
    x = _batch(x, params.p_x, "x")
    c = params.c
    W_tilde = params.W_x / np.sqrt(params.psi_x)[:, None] / c
    gram = W_tilde.T @ W_tilde
    if np.linalg.matrix_rank(W_tilde) < W_tilde.shape[1]:
        raise np.linalg.LinAlgError("normalized loadings W_tilde_x are rank deficient")
    sd_x = np.sqrt(np.diag(joint_covariance(params).cov)[: params.p_x])
    z = (x - params.mu_x) / sd_x
    return linalg.solve(gram, (z @ W_tilde).T, assume_a="pos").T


# --------------------------------------------------------------------------
# partially observed rows
# --------------------------------------------------------------------------


def _pattern_groups(mask):
    """Map each distinct row mask to the row indices carrying it."""
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    return [(patterns[k], np.flatnonzero(inverse == k)) for k in range(len(patterns))]


def _condition_rows(joint, values, observed_mask, target):
    """Condition ``joint`` row by row on the observed entries of ``values``.

    ``values`` covers the first ``values.shape[1]`` coordinates of the
    joint; rows are grouped by missingness pattern so each pattern solves
    its conditioning block once.  Returns per-row means and covariances of
    the ``target`` coordinates.
    """
    n = values.shape[0]
    k = len(target)
    means = np.empty((n, k))
    covs = np.empty((n, k, k))
    for pattern, rows in _pattern_groups(observed_mask):
        obs = np.flatnonzero(pattern)
        if obs.size == 0:
            means[rows] = joint.mean[target]
            covs[rows] = joint.cov[np.ix_(target, target)]
            continue
        cond = condition(joint, obs, values[np.ix_(rows, obs)])
        remaining = np.setdiff1d(np.arange(joint.dim), obs)
        pos = np.searchsorted(remaining, target)
        means[rows] = cond.mean[:, pos]
        covs[rows] = cond.cov[np.ix_(pos, pos)]
    return means, covs


def predict_y(params, x):
    """Predictive means and covariances of ``y`` for rows of ``x`` with NaNs.

    Missing inputs are marginalized, i.e. each row uses
    ``p(y | x_O)`` for its observed subset ``O``.  Rows with every input
    missing receive the marginal of ``y``.
    """
    x = np.atleast_2d(_batch(x, params.p_x, "x"))
    joint = joint_covariance(params)
    target = np.arange(params.p_x, params.p_x + params.p_y)
    return _condition_rows(joint, np.nan_to_num(x), ~np.isnan(x), target)


def factor_scores(params, x, y=None, with_y_scores=False):
    """Factor scores ``m^(x,y)``, ``m^(x)`` (and ``m^(y)``) for data with NaNs.

    Each row is conditioned on its observed subset via the joint of
    ``(x, y, z)``.
    """
    x = np.atleast_2d(_batch(x, params.p_x, "x"))
    joint = full_joint(params)
    p = params.p_x + params.p_y
    target = np.arange(p, p + params.p_u + params.p_v)
    n = x.shape[0]
    x_mask = ~np.isnan(x)
    vals_x = np.hstack([np.nan_to_num(x), np.zeros((n, params.p_y))])
    mask_x = np.hstack([x_mask, np.zeros((n, params.p_y), dtype=bool)])
    m_x, cov_x = _condition_rows(joint, vals_x, mask_x, target)
    m_xy = cov_xy = m_y = None
    if y is not None:
        y = np.atleast_2d(_batch(y, params.p_y, "y"))
        if y.shape[0] != n:
            raise ValueError("x and y have different numbers of rows")
        y_mask = ~np.isnan(y)
        vals = np.hstack([np.nan_to_num(x), np.nan_to_num(y)])
        m_xy, cov_xy = _condition_rows(joint, vals, np.hstack([x_mask, y_mask]), target)
        if with_y_scores:
            mask_y = np.hstack([np.zeros_like(x_mask), y_mask])
            m_y, _ = _condition_rows(joint, vals, mask_y, target)
    return FactorScores(m_xy=m_xy, m_x=m_x, cov_z_given_xy=cov_xy,
                        cov_z_given_x=cov_x, m_y=m_y)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def params_to_dict(params, canonical=False, extra=None):
    doc = {
        "p_x": params.p_x,
        "p_y": params.p_y,
        "p_u": params.p_u,
        "p_v": params.p_v,
        "mu_x": params.mu_x.tolist(),
        "mu_y": params.mu_y.tolist(),
        "W_xu": params.W_xu.tolist(),
        "W_xv": params.W_xv.tolist(),
        "W_yu": params.W_yu.tolist(),
        "psi_x": params.psi_x.tolist(),
        "psi_y": params.psi_y.tolist(),
        "c": params.c,
        "canonical": bool(canonical),
    }
    if extra:
        doc.update(extra)
    return doc


def params_from_dict(doc):
    """Inverse of :func:`params_to_dict`; rejects nonpositive unique variances."""
    try:
        p_x, p_y, p_u, p_v = (int(doc[k]) for k in ("p_x", "p_y", "p_u", "p_v"))
        psi_x = np.asarray(doc["psi_x"], dtype=float)
        psi_y = np.asarray(doc["psi_y"], dtype=float)
        W_xv = np.asarray(doc["W_xv"], dtype=float).reshape(p_x, p_v)
        arrays = dict(
            mu_x=np.asarray(doc["mu_x"], dtype=float).reshape(p_x),
            mu_y=np.asarray(doc["mu_y"], dtype=float).reshape(p_y),
            W_xu=np.asarray(doc["W_xu"], dtype=float).reshape(p_x, p_u),
            W_xv=W_xv,
            W_yu=np.asarray(doc["W_yu"], dtype=float).reshape(p_y, p_u),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed model document: {exc}") from exc
    if np.any(psi_x <= 0) or np.any(psi_y <= 0):
        raise ValueError("model document has nonpositive unique variances")
    return PlsParams(psi_x=psi_x, psi_y=psi_y, **arrays)


def save_params(path, params, canonical=False, extra=None):
    from ._io import atomic_write_text

    text = json.dumps(params_to_dict(params, canonical, extra), indent=2)
    atomic_write_text(path, text + "\n")


def load_params(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return params_from_dict(doc), doc


__all__ = [
    "LatentDims",
    "PlsParams",
    "FactorScores",
    "SingularCovarianceError",
    "joint_covariance",
    "full_joint",
    "posterior_z_given_xy",
    "posterior_z_given_x",
    "posterior_z_given_y",
    "regression_coefficients",
    "predict_y_given_x",
    "plug_in_predict",
    "classical_scores",
    "predict_y",
    "factor_scores",
    "params_to_dict",
    "params_from_dict",
    "save_params",
    "load_params",
]
