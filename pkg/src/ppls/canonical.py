"""
Norm constraint and identifiability machinery.

The norm constraint asks every row of ``W_bar = Psi^{-1/2} W`` to have the
same norm ``c``; equivalently every row of ``W_hat = diag(Sigma)^{-1/2} W``
has norm ``h`` with ``h^2 = c^2 / (1 + c^2)``.  Tying ``Psi`` to ``W`` this
way keeps unique variances away from zero.

The likelihood is invariant under independent rotations and sign flips of
the shared and input-specific latent subspaces.  :func:`canonicalize`
picks one representative per orbit: ``W_hat_yu^T W_hat_yu`` and
``W_hat_xv^T W_hat_xv`` diagonal with descending eigenvalues, and
nonnegative column sums of ``W_hat_yu`` and ``W_hat_xv``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import LatentDims, PlsParams, joint_covariance

TIE_TOL = 1e-8


class ConstraintError(ValueError):
    """The loadings violate the equal-row-norm constraint."""

    def __init__(self, message, worst_row=None, deviation=None):
        super().__init__(message)
        self.worst_row = worst_row
        self.deviation = deviation


class CanonicalFormWarning(UserWarning):
    """The canonical form exists but is not unique (tied or zero eigenvalues)."""


def h_from_c(c):
    c = float(c)
    if c < 0 or not np.isfinite(c):
        raise ValueError(f"c must be a nonnegative finite number, got {c}")
    return float(np.sqrt(c * c / (1.0 + c * c)))


def c_from_h(h):
    h = float(h)
    if not 0.0 <= h < 1.0:
        raise ValueError(f"h must lie in [0, 1), got {h}")
    return float(np.sqrt(h * h / (1.0 - h * h)))


@dataclass(frozen=True)
class ScaledLoadings:
    """``W_bar = Psi^{-1/2} W``, ``W_hat = diag(Sigma)^{-1/2} W`` and ``W_tilde = W_bar / c``."""

    w_bar: np.ndarray
    w_hat: np.ndarray
    w_tilde: np.ndarray
    c: float
    h: float


def constraint_deviation(params):
    """Row norms of ``W_bar`` relative to their mean square: ``|c_i^2/c^2 - 1|``."""
    wbar2 = np.sum(params.W**2, axis=1) / params.psi
    return np.abs(wbar2 / wbar2.mean() - 1.0)


def verify_constraint(params, tol=1e-6):
    """Raise :class:`ConstraintError` unless all rows of ``W_bar`` share one norm."""
    dev = constraint_deviation(params)
    worst = int(np.argmax(dev))
    if dev[worst] > tol:
        raise ConstraintError(
            f"norm constraint violated: row {worst} of W_bar deviates by {dev[worst]:.3e} "
            f"(relative, squared norm)", worst_row=worst, deviation=float(dev[worst]))
    return float(dev[worst])


def scale_loadings(params, tol=1e-6):
    verify_constraint(params, tol)
    W = params.W
    c = params.c
    w_bar = W / np.sqrt(params.psi)[:, None]
    sd = np.sqrt(np.diag(joint_covariance(params).cov))
    return ScaledLoadings(
        w_bar=w_bar,
        w_hat=W / sd[:, None],
        w_tilde=w_bar / c,
        c=c,
        h=h_from_c(c),
    )


def enforce_constraint(W_xu, W_xv, W_yu, c, mu_x=None, mu_y=None):
    """Parameters with unique variances bound to the loadings.

    Sets ``psi_i = ||W_i||^2 / c^2`` so that ``diag(W_bar W_bar^T) = c^2 I``
    holds exactly.  A zero loading row would need an infinite unique
    variance and is rejected.
    """
    W_xu = np.atleast_2d(np.asarray(W_xu, dtype=float))
    W_yu = np.atleast_2d(np.asarray(W_yu, dtype=float))
    p_x, p_y = W_xu.shape[0], W_yu.shape[0]
    W_xv = np.asarray(W_xv, dtype=float)
    if W_xv.size == 0:
        W_xv = np.zeros((p_x, 0))
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    row2_x = np.sum(W_xu**2, axis=1) + np.sum(W_xv**2, axis=1)
    row2_y = np.sum(W_yu**2, axis=1)
    zero = np.flatnonzero(np.concatenate([row2_x, row2_y]) == 0)
    if zero.size:
        raise ConstraintError(f"loading rows {zero.tolist()} are zero; drop those features",
                              worst_row=int(zero[0]))
    return PlsParams(
        mu_x=np.zeros(p_x) if mu_x is None else mu_x,
        mu_y=np.zeros(p_y) if mu_y is None else mu_y,
        W_xu=W_xu,
        W_xv=W_xv,
        W_yu=W_yu,
        psi_x=row2_x / c**2,
        psi_y=row2_y / c**2,
    )


# --------------------------------------------------------------------------
# identifiability
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Identifiability:
    identifiable: bool
    reasons: tuple = ()

    def __bool__(self):
        return self.identifiable


def check_identifiability(p_x, p_y, dims):
    """Dimension conditions under which canonical parameters are unique.

    Requires ``p_u + p_v < p_x + p_y``, ``p_v <= p_x`` and ``p_u <= p_y``.
    With a single objective variable this forces ``p_u = 1``.
    """
    p_u, p_v = dims.p_u, dims.p_v
    reasons = []
    if not p_u + p_v < p_x + p_y:
        reasons.append(f"p_u + p_v = {p_u + p_v} is not < p_x + p_y = {p_x + p_y}")
    if p_v > p_x:
        reasons.append(f"p_v = {p_v} > p_x = {p_x}")
    if p_u > p_y:
        reasons.append(f"p_u = {p_u} > p_y = {p_y}")
    return Identifiability(not reasons, tuple(reasons))


# --------------------------------------------------------------------------
# canonical form
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalForm:
    """Canonical representative together with its scaled spectra.

    ``omega2_yu`` and ``omega2_xv`` are the descending eigenvalues of
    ``W_hat_yu^T W_hat_yu`` and ``W_hat_xv^T W_hat_xv``.  ``degenerate``
    is set when two nonzero eigenvalues tie (the rotation inside the tied
    block is then arbitrary); ``zero_columns`` when a column carries no
    loading at all.
    """

    params: PlsParams
    omega2_yu: np.ndarray
    omega2_xv: np.ndarray
    degenerate: bool = False
    zero_columns: bool = False
    h: float = field(default=float("nan"))

    def to_dict(self):
        from .model import params_to_dict

        return params_to_dict(self.params, canonical=True, extra={
            "omega2_yu": self.omega2_yu.tolist(),
            "omega2_xv": self.omega2_xv.tolist(),
            "degenerate": self.degenerate,
            "h": self.h,
        })


def _rotation(block):
    """Eigenvectors of ``block^T block`` ordered by descending eigenvalue."""
    gram = block.T @ block
    gram = 0.5 * (gram + gram.T)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    return np.clip(evals[order], 0.0, None), evecs[:, order]


SIGN_TOL = 1e-8


def _vanishing(sums, scale):
    return np.abs(sums) <= SIGN_TOL * scale


def _signs(block, fallback=None):
    """Column signs making the column sums of ``block`` nonnegative.

    A vanishing sum defers to the column sum of ``fallback`` (the whole
    latent column), then to making the largest-magnitude entry positive.
    Vanishing sums are structural, not accidental: with ``p_u = p_y = 2``
    the constraint forces one canonical column of ``W_hat_yu`` to be
    proportional to ``(1, -1)``.
    """
    k = block.shape[1]
    signs = np.ones(k)
    if k == 0:
        return signs
    fb = block if fallback is None else fallback
    sums, scale = block.sum(axis=0), np.abs(block).sum(axis=0)
    fb_sums, fb_scale = fb.sum(axis=0), np.abs(fb).sum(axis=0)
    for j in range(k):
        if scale[j] > 0 and not _vanishing(sums[j], scale[j]):
            signs[j] = np.sign(sums[j])
        elif fb_scale[j] > 0 and not _vanishing(fb_sums[j], fb_scale[j]):
            signs[j] = np.sign(fb_sums[j])
        else:
            i = np.argmax(np.abs(fb[:, j]))
            signs[j] = 1.0 if fb[i, j] >= 0 else -1.0
    return signs


def sign_statistics(params):
    """The column sums that decide the sign of each latent axis.

    Returns ``(shared, unshared)``: for each column, the scaled-block
    column sum, or the whole-column sum where the block sum vanishes.
    Small magnitudes mean the canonical sign is fragile under noise.
    """
    sd = np.sqrt(np.diag(joint_covariance(params).cov))
    W_hat = params.W / sd[:, None]
    p_x, p_u = params.p_x, params.p_u
    out = []
    for block, full in ((W_hat[p_x:, :p_u], W_hat[:, :p_u]),
                        (W_hat[:p_x, p_u:], W_hat[:p_x, p_u:])):
        sums, scale = block.sum(axis=0), np.abs(block).sum(axis=0)
        out.append(np.where(_vanishing(sums, scale), full.sum(axis=0), sums))
    return out[0], out[1]


def _spectrum_flags(evals, tol):
    if evals.size == 0:
        return False, False
    top = evals.max()
    if top <= 0:
        return False, True
    zero = evals <= tol * top
    nz = evals[~zero]
    tied = nz.size > 1 and np.any(np.abs(np.diff(nz)) <= tol * top)
    return bool(tied), bool(zero.any())


def canonicalize(params, tie_tol=TIE_TOL, warn=True):
    """Rotate and reflect the latent axes into the canonical form.

    The observed-data covariance is unchanged; applying the function twice
    returns the same parameters.
    """
    sd = np.sqrt(np.diag(joint_covariance(params).cov))
    sd_x, sd_y = sd[: params.p_x], sd[params.p_x:]

    omega_u, R_u = _rotation(params.W_yu / sd_y[:, None])
    W_xu = params.W_xu @ R_u
    W_yu = params.W_yu @ R_u
    flip_u = _signs(W_yu / sd_y[:, None], np.vstack([W_xu, W_yu]) / sd[:, None])
    W_xu, W_yu = W_xu * flip_u, W_yu * flip_u

    if params.p_v:
        omega_v, R_v = _rotation(params.W_xv / sd_x[:, None])
        W_xv = params.W_xv @ R_v
        W_xv = W_xv * _signs(W_xv / sd_x[:, None])
    else:
        omega_v, W_xv = np.zeros(0), params.W_xv

    tied_u, zero_u = _spectrum_flags(omega_u, tie_tol)
    tied_v, zero_v = _spectrum_flags(omega_v, tie_tol)
    degenerate, zero_cols = tied_u or tied_v, zero_u or zero_v
    if warn and (degenerate or zero_cols):
        warnings.warn("canonical form is not unique: tied or zero loading eigenvalues",
                      CanonicalFormWarning, stacklevel=2)
    out = params.replace(W_xu=W_xu, W_xv=W_xv, W_yu=W_yu)
    c = out.c
    return CanonicalForm(
        params=out,
        omega2_yu=omega_u,
        omega2_xv=omega_v,
        degenerate=degenerate,
        zero_columns=zero_cols,
        h=h_from_c(c) if np.isfinite(c) else float("nan"),
    )


# --------------------------------------------------------------------------
# correlation-matrix view
# --------------------------------------------------------------------------


def correlation_matrix(cov):
    """``diag(Sigma)^{-1/2} Sigma diag(Sigma)^{-1/2}``."""
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    return 0.5 * (corr + corr.T)


def smallest_eigvalue_check(params):
    """Smallest eigenvalue of the observed correlation matrix.

    Under the norm constraint with ``p_u + p_v < p_x + p_y`` it equals
    ``1 - h^2``.
    """
    if not params.p_u + params.p_v < params.p_x + params.p_y:
        raise ValueError("needs p_u + p_v < p_x + p_y")
    corr = correlation_matrix(joint_covariance(params).cov)
    return float(np.linalg.eigvalsh(corr)[0])


def _top_factor(mat, k):
    evals, evecs = np.linalg.eigh(0.5 * (mat + mat.T))
    evals, evecs = evals[::-1][:k], evecs[:, ::-1][:, :k]
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def recover_from_covariance(cov, p_x, dims, mean=None):
    """Canonical parameters reconstructed directly from an observed covariance.

    Works block by block on the correlation matrix: ``h`` from its smallest
    eigenvalue, ``W_hat_yu`` from the yy block, ``W_hat_xu`` from the xy
    block, and ``W_hat_xv`` from what remains of the xx block.  Requires an
    identifiable ``dims`` and a covariance that the model can produce.
    """
    cov = np.asarray(cov, dtype=float)
    p = cov.shape[0]
    p_y = p - p_x
    if not check_identifiability(p_x, p_y, dims):
        raise ValueError("dimensions are not identifiable")
    sd = np.sqrt(np.diag(cov))
    corr = correlation_matrix(cov)
    lam_min = float(np.linalg.eigvalsh(corr)[0])
    eye = np.eye(p)
    shifted = corr - lam_min * eye
    what_yu = _top_factor(shifted[p_x:, p_x:], dims.p_u)
    gram = what_yu.T @ what_yu
    what_xu = np.linalg.solve(gram, (shifted[:p_x, p_x:] @ what_yu).T).T
    flip = _signs(what_yu, np.vstack([what_xu, what_yu]))
    what_xu, what_yu = what_xu * flip, what_yu * flip
    if dims.p_v:
        resid = shifted[:p_x, :p_x] - what_xu @ what_xu.T
        what_xv = _top_factor(resid, dims.p_v)
        what_xv = what_xv * _signs(what_xv)
    else:
        what_xv = np.zeros((p_x, 0))
    mean = np.zeros(p) if mean is None else np.asarray(mean, dtype=float)
    return PlsParams(
        mu_x=mean[:p_x],
        mu_y=mean[p_x:],
        W_xu=what_xu * sd[:p_x, None],
        W_xv=what_xv * sd[:p_x, None],
        W_yu=what_yu * sd[p_x:, None],
        psi_x=sd[:p_x] ** 2 * lam_min,
        psi_y=sd[p_x:] ** 2 * lam_min,
    )


__all__ = [
    "ConstraintError",
    "CanonicalFormWarning",
    "h_from_c",
    "c_from_h",
    "ScaledLoadings",
    "constraint_deviation",
    "verify_constraint",
    "scale_loadings",
    "enforce_constraint",
    "Identifiability",
    "check_identifiability",
    "CanonicalForm",
    "canonicalize",
    "sign_statistics",
    "correlation_matrix",
    "smallest_eigvalue_check",
    "recover_from_covariance",
    "LatentDims",
]
