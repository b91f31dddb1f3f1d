"""Random instances and independent oracles shared by the test modules."""

import numpy as np

from ppls.canonical import enforce_constraint
from ppls.gaussian import GaussianDist
from ppls.model import LatentDims, PlsParams


def random_spd(rng, d, floor=0.1):
    a = rng.standard_normal((d, d))
    return a @ a.T + floor * np.eye(d)


def random_params(rng, p_x, p_y, p_u, p_v, c=None):
    """Constraint-satisfying parameters; unconstrained ones when ``c`` is False."""
    W_xu = rng.standard_normal((p_x, p_u))
    W_xv = rng.standard_normal((p_x, p_v))
    W_yu = rng.standard_normal((p_y, p_u))
    mu_x, mu_y = rng.standard_normal(p_x), rng.standard_normal(p_y)
    if c is False:
        return PlsParams(mu_x, mu_y, W_xu, W_xv, W_yu,
                         rng.uniform(0.2, 2.0, p_x), rng.uniform(0.2, 2.0, p_y))
    c = rng.uniform(0.5, 3.0) if c is None else c
    return enforce_constraint(W_xu, W_xv, W_yu, c, mu_x=mu_x, mu_y=mu_y)


def random_dims(rng, max_px=6, max_py=3, max_pu=3, max_pv=3):
    """Identifiable dimensions drawn uniformly from the given box."""
    while True:
        p_x = int(rng.integers(1, max_px + 1))
        p_y = int(rng.integers(1, max_py + 1))
        p_u = int(rng.integers(1, min(max_pu, p_y) + 1))
        p_v = int(rng.integers(0, min(max_pv, p_x) + 1))
        if p_u + p_v < p_x + p_y:
            return p_x, p_y, LatentDims(p_u, p_v)


def dense_joint(params):
    """Joint of ``(x, y, u, v)`` assembled entry by entry from the generative model."""
    p_x, p_y, p_u, p_v = params.p_x, params.p_y, params.p_u, params.p_v
    # loadings of every observed variable on every latent variable
    L = np.zeros((p_x + p_y, p_u + p_v))
    L[:p_x, :p_u] = params.W_xu
    L[:p_x, p_u:] = params.W_xv
    L[p_x:, :p_u] = params.W_yu
    q = p_u + p_v
    top = L @ L.T + np.diag(np.concatenate([params.psi_x, params.psi_y]))
    cov = np.block([[top, L], [L.T, np.eye(q)]])
    mean = np.concatenate([params.mu_x, params.mu_y, np.zeros(q)])
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def precision_condition(mean, cov, observed, values):
    """Conditional from the precision matrix: ``Lambda_AA^{-1}`` and ``mu_A - Lambda_AA^{-1} Lambda_AB (v - mu_B)``."""
    d = len(mean)
    obs = np.asarray(observed)
    rest = np.setdiff1d(np.arange(d), obs)
    lam = np.linalg.inv(cov)
    cov_a = np.linalg.inv(lam[np.ix_(rest, rest)])
    m = mean[rest] - cov_a @ lam[np.ix_(rest, obs)] @ (np.asarray(values) - mean[obs])
    return m, cov_a


def naive_loglik(mean, cov, rows):
    """Sum of per-row log-densities over each row's observed entries, via slogdet and inv."""
    total = 0.0
    for r in rows:
        o = ~np.isnan(r)
        if not o.any():
            continue
        s = cov[np.ix_(o, o)]
        d = r[o] - mean[o]
        _, logdet = np.linalg.slogdet(s)
        total += -0.5 * (o.sum() * np.log(2 * np.pi) + logdet + d @ np.linalg.inv(s) @ d)
    return total
