"""
Block-Gaussian algebra: log-densities, marginals and conditionals.

Every conditional in the model reduces to a Schur complement of some joint
covariance.  The functions here work on arbitrary index subsets so the same
code path serves complete and partially observed rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

LOG_2PI = np.log(2.0 * np.pi)


class SingularCovarianceError(np.linalg.LinAlgError):
    """Raised when a covariance block that must be inverted is not positive definite."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


def symmetrize(m):
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class GaussianDist:
    """A multivariate normal given by its mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"cov has shape {cov.shape}, expected {(d, d)}")
        scale = max(np.abs(cov).max(initial=0.0), 1.0)
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("cov is not symmetric")
        if d and not np.all(np.isfinite(cov)):
            raise ValueError("cov has non-finite entries")
        if d:
            lam = np.linalg.eigvalsh(symmetrize(cov))[0]
            if lam < -1e-10 * max(np.abs(cov).max(), np.finfo(float).tiny):
                raise ValueError(f"cov is not positive semidefinite (smallest eigenvalue {lam:.3e})")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def var(self):
        return np.diag(self.cov).copy()


def _as_index(indices, dim):
    idx = np.asarray(indices, dtype=int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= dim):
        raise IndexError(f"index out of range for dimension {dim}: {idx.tolist()}")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise ValueError("indices must be strictly increasing")
    return idx


def cholesky(cov, ridge=0.0, what="covariance"):
    """Lower Cholesky factor of ``cov + ridge*I``.

    Raises
    ------
    SingularCovarianceError
        If the matrix is not numerically positive definite.  The error
        message carries the smallest eigenvalue.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    a = cov + ridge * np.eye(cov.shape[0]) if ridge else cov
    try:
        return linalg.cholesky(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        if np.all(np.isfinite(a)):
            lam = float(np.linalg.eigvalsh(symmetrize(a))[0])
        else:
            lam = float("nan")
        raise SingularCovarianceError(
            f"{what} is not positive definite (smallest eigenvalue {lam:.3e})", lam
        ) from None


def log_density(dist, x, ridge=0.0):
    """Log of the normal density ``N(x | dist.mean, dist.cov)``.

    ``x`` may be a single vector or an ``(n, d)`` array of rows, in which
    case a vector of log-densities is returned.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != dist.dim:
        raise ValueError(f"x has dimension {xs.shape[1]}, expected {dist.dim}")
    chol = cholesky(dist.cov, ridge)
    z = linalg.solve_triangular(chol, (xs - dist.mean).T, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    out = -0.5 * (dist.dim * LOG_2PI + logdet + np.sum(z * z, axis=0))
    return float(out[0]) if single else out


def marginal(joint, keep):
    """Distribution of the coordinates ``keep`` (order preserved)."""
    idx = _as_index(keep, joint.dim)
    if idx.size == 0:
        raise ValueError("keep must be nonempty")
    return GaussianDist(joint.mean[idx], joint.cov[np.ix_(idx, idx)])


def condition(joint, observed, values, ridge=0.0):
    """Distribution of the remaining coordinates given ``x[observed] = values``.

    Uses ``mu_A + S_AB S_BB^{-1} (v - mu_B)`` and the Schur complement
    ``S_AA - S_AB S_BB^{-1} S_BA``.  Conditioning on the empty set returns
    the joint unchanged.  ``values`` may also be an ``(n, |B|)`` array, in
    which case the returned mean has one row per observation (the
    covariance is shared).
    """
    idx_b = _as_index(observed, joint.dim)
    if idx_b.size == joint.dim:
        raise ValueError("cannot condition on every coordinate")
    values = np.asarray(values, dtype=float)
    if values.shape[-1:] != idx_b.shape and not (idx_b.size == 0 and values.size == 0):
        raise ValueError(f"values have shape {values.shape}, expected trailing {idx_b.size}")
    if idx_b.size == 0:
        return joint
    idx_a = np.setdiff1d(np.arange(joint.dim), idx_b)
    s_bb = joint.cov[np.ix_(idx_b, idx_b)]
    s_ab = joint.cov[np.ix_(idx_a, idx_b)]
    chol = cholesky(s_bb, ridge, what="conditioning block")
    # gain = S_AB S_BB^{-1}
    gain = linalg.cho_solve((chol, True), s_ab.T).T
    resid = values - joint.mean[idx_b]
    mean = joint.mean[idx_a] + resid @ gain.T
    cov = symmetrize(joint.cov[np.ix_(idx_a, idx_a)] - gain @ s_ab.T)
    if mean.ndim == 2:
        return ConditionalRows(mean, cov)
    return GaussianDist(mean, cov)


@dataclass(frozen=True)
class ConditionalRows:
    """Per-row conditional means sharing a single covariance."""

    mean: np.ndarray
    cov: np.ndarray
