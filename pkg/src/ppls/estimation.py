"""
Maximum-likelihood fitting under the norm constraint, with missing entries.

The free coordinates are the means, every entry of ``W_xu``, ``W_xv`` and
``W_yu``, and ``log c``.  Unique variances are not free: they are bound to
the loadings by ``psi_i = ||W_i||^2 / c^2``, so every iterate satisfies the
constraint exactly.  Rotations of the latent axes are left free during
optimization and fixed afterwards by :func:`ppls.canonical.canonicalize`.

Rows are bucketed by missingness pattern.  Each bucket is summarized once
by its weighted count, mean and centered scatter, so a likelihood or
gradient evaluation costs one Cholesky factorization per pattern
regardless of the number of rows.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .canonical import CanonicalForm, canonicalize, check_identifiability
from .gaussian import LOG_2PI, SingularCovarianceError, cholesky, symmetrize
from .model import LatentDims, PlsParams

logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Every restart of a fit failed."""

    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces or []


class DataError(ValueError):
    """Input data unusable for fitting."""


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Explanatory and objective variables with NaN marking missing entries.

    Build instances with :meth:`from_arrays`, which drops rows with no
    observed entry at all and records how many were dropped.
    """

    x: np.ndarray
    y: np.ndarray
    row_weights: np.ndarray | None = None
    n_dropped: int = 0
    x_names: tuple = ()
    y_names: tuple = ()

    @classmethod
    def from_arrays(cls, x, y, row_weights=None, x_names=(), y_names=()):
        x = np.array(x, dtype=float, ndmin=2)
        y = np.array(y, dtype=float, ndmin=2)
        if y.shape[0] != x.shape[0] and y.shape[1] == x.shape[0] and y.shape[0] == 1:
            y = y.T
        if x.shape[0] != y.shape[0]:
            raise DataError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if np.isinf(x).any() or np.isinf(y).any():
            raise DataError("data contain infinite values")
        keep = ~(np.isnan(x).all(axis=1) & np.isnan(y).all(axis=1))
        if row_weights is not None:
            row_weights = np.asarray(row_weights, dtype=float).reshape(-1)
            if row_weights.shape[0] != x.shape[0] or np.any(row_weights <= 0):
                raise DataError("row_weights must be positive, one per row")
            row_weights = row_weights[keep]
        n_dropped = int((~keep).sum())
        if n_dropped:
            logger.info("dropped %d rows with no observed entries", n_dropped)
        x, y = x[keep], y[keep]
        for a in (x, y):
            a.setflags(write=False)
        return cls(x, y, row_weights, n_dropped, tuple(x_names), tuple(y_names))

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p_x(self):
        return self.x.shape[1]

    @property
    def p_y(self):
        return self.y.shape[1]

    @property
    def x_mask(self):
        return ~np.isnan(self.x)

    @property
    def y_mask(self):
        return ~np.isnan(self.y)

    @property
    def weights(self):
        return np.ones(self.n) if self.row_weights is None else self.row_weights

    @property
    def n_effective(self):
        return float(self.weights.sum())

    def joint(self):
        return np.hstack([self.x, self.y])

    def subset(self, rows):
        w = None if self.row_weights is None else self.row_weights[rows]
        return Dataset.from_arrays(self.x[rows], self.y[rows], w, self.x_names, self.y_names)


@dataclass(frozen=True)
class PatternStats:
    """Weighted sufficient statistics of the rows sharing one missingness pattern."""

    observed: np.ndarray
    weight: float
    mean: np.ndarray
    scatter: np.ndarray
    n_rows: int


def pattern_stats(data):
    z = data.joint()
    mask = ~np.isnan(z)
    w = data.weights
    patterns, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    out = []
    for k, pattern in enumerate(patterns):
        obs = np.flatnonzero(pattern)
        if obs.size == 0:
            continue
        rows = np.flatnonzero(inverse == k)
        zk = z[np.ix_(rows, obs)]
        wk = w[rows]
        wsum = wk.sum()
        mean = wk @ zk / wsum
        centered = zk - mean
        scatter = symmetrize((centered * wk[:, None]).T @ centered)
        out.append(PatternStats(obs, float(wsum), mean, scatter, rows.size))
    return out


# --------------------------------------------------------------------------
# likelihood and gradient
# --------------------------------------------------------------------------


def _loglik_and_sigma_grad(mu, cov, stats, need_grad=True):
    """Observed-data log-likelihood and its gradients w.r.t. ``mu`` and ``cov``.

    The covariance gradient ``G`` is symmetric and satisfies
    ``d loglik = tr(G dSigma)``.
    """
    p = mu.size
    ll = 0.0
    G = np.zeros((p, p)) if need_grad else None
    g_mu = np.zeros(p) if need_grad else None
    for st in stats:
        obs = st.observed
        s_oo = cov[np.ix_(obs, obs)]
        chol = cholesky(s_oo, what=f"covariance of missingness pattern {obs.tolist()}")
        r = st.mean - mu[obs]
        S = st.scatter + st.weight * np.outer(r, r)
        inv = linalg.cho_solve((chol, True), np.eye(obs.size))
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        inv_S = inv @ S
        ll -= 0.5 * (st.weight * (obs.size * LOG_2PI + logdet) + np.trace(inv_S))
        if need_grad:
            G[np.ix_(obs, obs)] += 0.5 * (inv_S @ inv - st.weight * inv)
            g_mu[obs] += st.weight * (inv @ r)
    if need_grad:
        G = symmetrize(G)
    return ll, g_mu, G


def log_likelihood(params, data):
    """Observed-data log-likelihood; missing entries are marginalized out."""
    if (data.p_x, data.p_y) != (params.p_x, params.p_y):
        raise ValueError("data and parameters have different dimensions")
    cov = symmetrize(np.diag(params.psi) + params.W @ params.W.T)
    ll, _, _ = _loglik_and_sigma_grad(params.mu, cov, pattern_stats(data), need_grad=False)
    return ll


@dataclass(frozen=True)
class _Layout:
    """Packing of the free parameters into a flat vector."""

    p_x: int
    p_y: int
    p_u: int
    p_v: int
    constrained: bool = True
    ridge: float = 0.0

    @property
    def size(self):
        p = self.p_x + self.p_y
        tail = 1 if self.constrained else p
        return p + self.p_x * (self.p_u + self.p_v) + self.p_y * self.p_u + tail

    def pack(self, params):
        parts = [params.mu_x, params.mu_y, params.W_xu.ravel(), params.W_xv.ravel(),
                 params.W_yu.ravel()]
        if self.constrained:
            parts.append([np.log(params.c)])
        else:
            parts.append(np.log(params.psi))
        return np.concatenate(parts)

    def split(self, theta):
        p_x, p_y, p_u, p_v = self.p_x, self.p_y, self.p_u, self.p_v
        sizes = [p_x, p_y, p_x * p_u, p_x * p_v, p_y * p_u]
        offs = np.cumsum([0] + sizes)
        mu_x = theta[offs[0]:offs[1]]
        mu_y = theta[offs[1]:offs[2]]
        W_xu = theta[offs[2]:offs[3]].reshape(p_x, p_u)
        W_xv = theta[offs[3]:offs[4]].reshape(p_x, p_v)
        W_yu = theta[offs[4]:offs[5]].reshape(p_y, p_u)
        return mu_x, mu_y, W_xu, W_xv, W_yu, theta[offs[5]:]

    def block_w(self, W_xu, W_xv, W_yu):
        return np.block([[W_xu, W_xv], [W_yu, np.zeros((self.p_y, self.p_v))]])

    def psi(self, theta):
        _, _, W_xu, W_xv, W_yu, tail = self.split(theta)
        if self.constrained:
            W = self.block_w(W_xu, W_xv, W_yu)
            return np.sum(W**2, axis=1) * np.exp(-2.0 * tail[0])
        return np.exp(tail)

    def unpack(self, theta):
        mu_x, mu_y, W_xu, W_xv, W_yu, _ = self.split(theta)
        psi = self.psi(theta)
        return PlsParams(mu_x, mu_y, W_xu, W_xv, W_yu, psi[: self.p_x], psi[self.p_x:])

    def loglik_and_grad(self, theta, stats):
        mu_x, mu_y, W_xu, W_xv, W_yu, tail = self.split(theta)
        W = self.block_w(W_xu, W_xv, W_yu)
        psi = self.psi(theta)
        mu = np.concatenate([mu_x, mu_y])
        cov = symmetrize(np.diag(psi + self.ridge) + W @ W.T)
        ll, g_mu, G = _loglik_and_sigma_grad(mu, cov, stats)
        g_diag = np.diag(G)
        g_W = 2.0 * G @ W
        if self.constrained:
            c2 = np.exp(2.0 * tail[0])
            g_W += 2.0 * (g_diag / c2)[:, None] * W
            g_tail = np.array([-2.0 * np.dot(g_diag, psi)])
        else:
            g_tail = g_diag * psi
        p_x, p_u = self.p_x, self.p_u
        grad = np.concatenate([
            g_mu,
            g_W[:p_x, :p_u].ravel(),
            g_W[:p_x, p_u:].ravel(),
            g_W[p_x:, :p_u].ravel(),
            g_tail,
        ])
        return ll, grad


def log_likelihood_gradient(params, data, constrained=True):
    """Analytic gradient of :func:`log_likelihood` w.r.t. the free coordinates.

    Returns a dict with keys ``mu_x, mu_y, W_xu, W_xv, W_yu`` and either
    ``log_c`` (constrained) or ``log_psi``.  In the constrained case the
    unique variances are treated as ``||W_i||^2 / c^2``, so ``params``
    should satisfy the constraint.
    """
    layout = _Layout(params.p_x, params.p_y, params.p_u, params.p_v, constrained)
    theta = layout.pack(params)
    _, grad = layout.loglik_and_grad(theta, pattern_stats(data))
    return dict(zip(
        ("mu_x", "mu_y", "W_xu", "W_xv", "W_yu", "log_c" if constrained else "log_psi"),
        layout.split(grad),
    ))


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``constrained=False`` frees the unique variances (log scale) and is
    only meant for contrasting against the constrained fit.
    ``allow_nonidentifiable`` permits fitting cells that violate the
    identifiability conditions; such fits are not canonicalized.
    """

    dims: LatentDims
    max_iters: int = 2000
    rel_tol: float = 1e-8
    n_restarts: int = 8
    seed: int = 0
    ridge: float = 0.0
    constrained: bool = True
    allow_nonidentifiable: bool = False
    patience: int = 3
    init_scale: float = 0.25

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iters < 1 or self.n_restarts < 1:
            raise ValueError("max_iters and n_restarts must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")


@dataclass
class RestartTrace:
    """Per-iterate record of one optimizer run.

    ``min_psi`` and ``psi_floor`` hold ``min_i psi_i`` and
    ``min_i ||W_i||^2 / c^2``; under the constraint the two coincide.
    """

    loglik: list = field(default_factory=list)
    min_psi: list = field(default_factory=list)
    psi_floor: list = field(default_factory=list)
    message: str = ""
    failed: bool = False


@dataclass
class FitResult:
    params: PlsParams
    canonical: CanonicalForm | None
    loglik: float
    bic: float
    n_params: int
    iterations: int
    converged: bool
    restart_logliks: np.ndarray
    identifiable: bool
    dims: LatentDims
    n_obs: float
    trace: RestartTrace | None = None

    @property
    def best_so_far(self):
        return np.maximum.accumulate(np.where(np.isfinite(self.restart_logliks),
                                              self.restart_logliks, -np.inf))


def count_free_params(p_x, p_y, dims, constrained=True):
    """Number of free parameters for the BIC penalty.

    Means, loading entries and ``c``, minus the rotational degrees of
    freedom of each latent subspace.  Without the constraint each unique
    variance is free instead of ``c``.
    """
    p_u, p_v = dims.p_u, dims.p_v
    p = p_x + p_y
    loadings = p * p_u + p_x * p_v
    rotations = p_u * (p_u - 1) // 2 + p_v * (p_v - 1) // 2
    return p + loadings - rotations + (1 if constrained else p)


def bic_value(loglik, n_params, n):
    return -2.0 * loglik + n_params * np.log(n)


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def sample_moments(data):
    """Mean and covariance used to seed the optimizer.

    Complete-case covariance when enough complete rows exist, otherwise
    pairwise-complete.  Returns ``(mean, cov, method, n_usable)``.
    """
    z = data.joint()
    mask = ~np.isnan(z)
    p = z.shape[1]
    complete = mask.all(axis=1)
    mean = np.nanmean(z, axis=0) if mask.any(axis=0).all() else np.nan_to_num(np.nanmean(z, axis=0))
    if complete.sum() >= p + 1:
        zc = z[complete]
        return mean, np.cov(zc, rowvar=False, ddof=1).reshape(p, p), "complete", int(complete.sum())
    m = mask.astype(float)
    z0 = np.where(mask, z, 0.0)
    counts = m.T @ m
    sum_ij = z0.T @ m  # [i, j]: sum of x_i over rows where i and j are observed
    cross = z0.T @ z0
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = (cross - sum_ij * sum_ij.T / counts) / (counts - 1)
    cov = np.where(counts > 1, cov, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        var = np.nanvar(z, axis=0, ddof=1)
    cov[np.diag_indices(p)] = np.where(np.isfinite(var), var, 1.0)
    off = ~np.eye(p, dtype=bool)
    n_usable = int(counts[off].min()) if p > 1 else int(counts[0, 0])
    return mean, symmetrize(cov), "pairwise", n_usable


def _psd_correlation(cov):
    sd = np.sqrt(np.clip(np.diag(cov), 1e-12, None))
    corr = cov / np.outer(sd, sd)
    evals, evecs = np.linalg.eigh(symmetrize(corr))
    corr = (evecs * np.clip(evals, 1e-6, None)) @ evecs.T
    d = np.sqrt(np.diag(corr))
    return symmetrize(corr / np.outer(d, d)), sd


def _top_columns(mat, k, rng):
    evals, evecs = np.linalg.eigh(symmetrize(mat))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    m = min(k, mat.shape[0])
    cols = evecs[:, :m] * np.sqrt(np.clip(evals[:m], 1e-6, None))
    if k > m:
        cols = np.hstack([cols, 0.1 * rng.standard_normal((mat.shape[0], k - m))])
    return cols


def initialize(data, dims, seed=0, moments=None, c0=1.0):
    """Deterministic starting point built from sample moments.

    Works on the correlation scale with ``h`` implied by ``c0``: the top
    eigenvectors of the yy block seed ``W_yu``, the xy block regressed on
    them seeds ``W_xu``, and the residual xx block seeds ``W_xv``.  Each
    row is then rescaled to norm ``h`` so the start satisfies the
    constraint with unique variances close to the sample variances.
    """
    rng = np.random.default_rng(seed)
    p_x, p_y = data.p_x, data.p_y
    p = p_x + p_y
    mean, cov, _, n_usable = moments if moments is not None else sample_moments(data)
    if n_usable < dims.q + 1:
        raise DataError(f"only {n_usable} usable rows; need at least {dims.q + 1}")
    corr, sd = _psd_correlation(cov)
    h2 = c0**2 / (1.0 + c0**2)
    shifted = corr - (1.0 - h2) * np.eye(p)
    w_yu = _top_columns(shifted[p_x:, p_x:], dims.p_u, rng)
    gram = w_yu.T @ w_yu + 1e-8 * np.eye(dims.p_u)
    w_xu = np.linalg.solve(gram, (shifted[:p_x, p_x:] @ w_yu).T).T
    if dims.p_v:
        w_xv = _top_columns(shifted[:p_x, :p_x] - w_xu @ w_xu.T, dims.p_v, rng)
    else:
        w_xv = np.zeros((p_x, 0))
    W_hat = np.block([[w_xu, w_xv], [w_yu, np.zeros((p_y, dims.p_v))]])
    # rows rescaled to norm h; zero rows get a random direction
    norms = np.linalg.norm(W_hat, axis=1)
    for i in np.flatnonzero(norms < 1e-8):
        W_hat[i] = rng.standard_normal(W_hat.shape[1])
        if i >= p_x:
            W_hat[i, dims.p_u:] = 0.0
        norms[i] = np.linalg.norm(W_hat[i])
    W = W_hat / norms[:, None] * np.sqrt(h2) * sd[:, None]
    psi = np.sum(W**2, axis=1) / c0**2
    mean = np.where(np.isfinite(mean), mean, 0.0)
    return PlsParams(mean[:p_x], mean[p_x:], W[:p_x, :dims.p_u], W[:p_x, dims.p_u:],
                     W[p_x:, :dims.p_u], psi[:p_x], psi[p_x:])


def _perturb(params, rng, scale):
    def jitter(a):
        return a * np.exp(scale * rng.standard_normal(a.shape))

    W_xu, W_xv, W_yu = jitter(params.W_xu), jitter(params.W_xv), jitter(params.W_yu)
    W = np.block([[W_xu, W_xv], [W_yu, np.zeros((params.p_y, params.p_v))]])
    c = params.c * np.exp(scale * rng.standard_normal())
    psi = np.sum(W**2, axis=1) / c**2
    return PlsParams(params.mu_x, params.mu_y, W_xu, W_xv, W_yu,
                     psi[: params.p_x], psi[params.p_x:])


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


def _run(layout, theta0, stats, n_eff, config):
    trace = RestartTrace()
    scale = 1.0 / n_eff
    state = {"last": None, "calm": 0, "met": False}

    def fun(theta):
        try:
            ll, grad = layout.loglik_and_grad(theta, stats)
        except SingularCovarianceError:
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(ll):
            return np.inf, np.zeros_like(theta)
        return -ll * scale, -grad * scale

    def callback(intermediate_result):
        theta = intermediate_result.x
        ll = -intermediate_result.fun / scale
        psi = layout.psi(theta)
        _, _, W_xu, W_xv, W_yu, tail = layout.split(theta)
        W = layout.block_w(W_xu, W_xv, W_yu)
        trace.loglik.append(float(ll))
        trace.min_psi.append(float(psi.min()))
        if layout.constrained:
            trace.psi_floor.append(float(np.sum(W**2, axis=1).min() * np.exp(-2.0 * tail[0])))
        last = state["last"]
        if last is not None and abs(ll - last) <= config.rel_tol * max(abs(last), 1.0):
            state["calm"] += 1
        else:
            state["calm"] = 0
        state["last"] = ll
        if state["calm"] >= config.patience:
            state["met"] = True
            raise StopIteration

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        res = optimize.minimize(
            fun, theta0, jac=True, method="L-BFGS-B", callback=callback,
            options={"maxiter": config.max_iters, "ftol": 1e-15, "gtol": 1e-9,
                     "maxcor": 20},
        )
    trace.message = str(res.message)
    theta = res.x
    try:
        ll, _ = layout.loglik_and_grad(theta, stats)
    except SingularCovarianceError as exc:
        trace.failed, trace.message = True, str(exc)
        return None, trace, int(res.nit), False
    if not np.isfinite(ll):
        trace.failed = True
        return None, trace, int(res.nit), False
    converged = state["met"] or bool(res.success)
    return (theta, float(ll)), trace, int(res.nit), converged


def _check_spread(data):
    z = data.joint()
    if z.shape[0] == 0:
        raise FitError("no rows to fit")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        spread = np.nanmax(z, axis=0) - np.nanmin(z, axis=0)
    bad = np.flatnonzero(~(spread > 0))
    if bad.size:
        names = list(data.x_names or [f"x{i + 1}" for i in range(data.p_x)])
        names += list(data.y_names or [f"y{i + 1}" for i in range(data.p_y)])
        raise FitError("constant or unobserved variable(s), likelihood is unbounded: "
                       + ", ".join(names[i] for i in bad))


def fit(data, config, start=None, moments=None):
    """Fit the model by maximum likelihood.

    Runs ``config.n_restarts`` L-BFGS ascents: the first from
    :func:`initialize`, the rest from multiplicative perturbations of it
    (or of ``start`` when given).  The best run is canonicalized when the
    latent dimensions are identifiable.

    Raises
    ------
    ValueError
        Non-identifiable dimensions without ``allow_nonidentifiable``.
    FitError
        No restart produced a finite likelihood, or a variable has no
        spread (its unique variance would collapse to zero).
    """
    dims = config.dims
    _check_spread(data)
    ident = check_identifiability(data.p_x, data.p_y, dims)
    if not ident and not config.allow_nonidentifiable:
        raise ValueError("latent dimensions are not identifiable: " + "; ".join(ident.reasons))
    layout = _Layout(data.p_x, data.p_y, dims.p_u, dims.p_v, config.constrained, config.ridge)
    stats = pattern_stats(data)
    n_eff = data.n_effective
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_restarts + 1)
    base = start if start is not None else initialize(
        data, dims, np.random.default_rng(seeds[0]), moments=moments)

    best = None
    logliks = np.full(config.n_restarts, -np.inf)
    traces = []
    for k in range(config.n_restarts):
        rng = np.random.default_rng(seeds[k + 1])
        theta0 = layout.pack(base if k == 0 else _perturb(base, rng, config.init_scale))
        out, trace, nit, converged = _run(layout, theta0, stats, n_eff, config)
        traces.append(trace)
        if out is None:
            logger.warning("restart %d abandoned: %s", k, trace.message)
            continue
        logliks[k] = out[1]
        if best is None or out[1] > best[1]:
            best = (out[0], out[1], nit, converged, trace)
    if best is None:
        raise FitError("all restarts failed", traces)

    theta, ll, nit, converged, trace = best
    params = layout.unpack(theta)
    canonical = None
    if ident:
        canonical = canonicalize(params, warn=False)
        params = canonical.params
    k = count_free_params(data.p_x, data.p_y, dims, config.constrained)
    return FitResult(
        params=params,
        canonical=canonical,
        loglik=ll,
        bic=bic_value(ll, k, n_eff),
        n_params=k,
        iterations=nit,
        converged=converged,
        restart_logliks=logliks,
        identifiable=bool(ident),
        dims=dims,
        n_obs=n_eff,
        trace=trace,
    )


__all__ = [
    "Dataset",
    "DataError",
    "FitError",
    "FitConfig",
    "FitResult",
    "RestartTrace",
    "PatternStats",
    "pattern_stats",
    "log_likelihood",
    "log_likelihood_gradient",
    "count_free_params",
    "bic_value",
    "sample_moments",
    "initialize",
    "fit",
]
