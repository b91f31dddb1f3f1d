"""
Synthetic data from the generative model and sampling-distribution studies.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text, fmt, jsonable
from .canonical import CanonicalForm, canonicalize, check_identifiability
from .estimation import Dataset, FitError, fit

logger = logging.getLogger(__name__)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def inject_missing(a, frac, seed=None):
    """Copy of ``a`` with ``round(frac * a.size)`` entries, chosen uniformly, set to NaN."""
    if not 0.0 <= frac < 1.0:
        raise ValueError("frac must lie in [0, 1)")
    rng = _rng(seed)
    out = np.array(a, dtype=float, copy=True)
    k = int(round(frac * out.size))
    if k:
        idx = rng.choice(out.size, size=k, replace=False)
        out.flat[idx] = np.nan
    return out


def sample(params, n, seed=None, missing_frac=0.0, missing_block="x", return_latent=False):
    """Draw ``n`` rows from the generative model.

    Latent variables are drawn first and the observations given them, so
    the joint covariance is never factorized.  ``missing_frac`` masks that
    fraction of the entries of ``missing_block`` (``"x"``, ``"y"`` or
    ``"both"``) uniformly at random.
    """
    rng = _rng(seed)
    u = rng.standard_normal((n, params.p_u))
    v = rng.standard_normal((n, params.p_v))
    ex = rng.standard_normal((n, params.p_x)) * np.sqrt(params.psi_x)
    ey = rng.standard_normal((n, params.p_y)) * np.sqrt(params.psi_y)
    x = params.mu_x + u @ params.W_xu.T + v @ params.W_xv.T + ex
    y = params.mu_y + u @ params.W_yu.T + ey
    if missing_frac:
        if missing_block in ("x", "both"):
            x = inject_missing(x, missing_frac, rng)
        if missing_block in ("y", "both"):
            y = inject_missing(y, missing_frac, rng)
        if missing_block not in ("x", "y", "both"):
            raise ValueError("missing_block must be 'x', 'y' or 'both'")
    data = Dataset.from_arrays(x, y)
    if return_latent:
        return data, np.hstack([u, v])
    return data


def random_canonical_params(p_x, p_y, dims, c=1.5, seed=None, min_gap=0.0,
                            min_colsum=0.0, max_tries=10_000):
    """Random constraint-satisfying parameters in canonical form.

    Draws Gaussian loadings, binds unique variances through the constraint
    and canonicalizes.  Draws are rejected until consecutive eigenvalues of
    each scaled loading block differ by at least ``min_gap`` (relative to
    the largest) and every sign-deciding column sum (see
    :func:`ppls.canonical.sign_statistics`) is at least ``min_colsum``.
    Both keep the canonical axes stable under estimation noise.
    """
    from .canonical import enforce_constraint, sign_statistics

    rng = _rng(seed)
    for _ in range(max_tries):
        params = enforce_constraint(
            rng.standard_normal((p_x, dims.p_u)),
            rng.standard_normal((p_x, dims.p_v)),
            rng.standard_normal((p_y, dims.p_u)),
            c,
            mu_x=rng.standard_normal(p_x),
            mu_y=rng.standard_normal(p_y),
        )
        form = canonicalize(params, warn=False)
        ok = True
        for omega, sums in zip((form.omega2_yu, form.omega2_xv), sign_statistics(form.params)):
            if omega.size == 0:
                continue
            gaps = -np.diff(np.append(omega, 0.0)) / omega[0]
            if gaps.min() < min_gap or sums.min() < min_colsum:
                ok = False
        if ok:
            return form
    raise RuntimeError("no draw met the separation requirements")


# --------------------------------------------------------------------------
# parameter vectors
# --------------------------------------------------------------------------


def parameter_vector(params):
    """Flatten parameters into ``(names, values)``.

    Covers means, every loading entry, unique variances and ``c``.
    """
    names, values = [], []

    def add(prefix, arr):
        arr = np.asarray(arr)
        for idx in np.ndindex(arr.shape):
            names.append(prefix + "[" + ",".join(str(i) for i in idx) + "]")
            values.append(float(arr[idx]))

    add("mu_x", params.mu_x)
    add("mu_y", params.mu_y)
    add("W_xu", params.W_xu)
    add("W_xv", params.W_xv)
    add("W_yu", params.W_yu)
    add("psi_x", params.psi_x)
    add("psi_y", params.psi_y)
    names.append("c")
    values.append(params.c)
    return names, np.array(values)


def alignment_is_identity(estimate, truth):
    """Whether no latent permutation/sign change moves ``estimate`` closer to ``truth``.

    Checks all column permutations within the shared and input-specific
    blocks combined with all sign patterns.
    """
    def block_dist(est, ref):
        best = None
        k = est.shape[1]
        for perm in itertools.permutations(range(k)):
            for signs in itertools.product((1.0, -1.0), repeat=k):
                d = np.sum((est[:, perm] * signs - ref) ** 2)
                if best is None or d < best[0] - 1e-15:
                    best = (d, perm, signs)
        return best

    est_u = np.vstack([estimate.W_xu, estimate.W_yu])
    ref_u = np.vstack([truth.W_xu, truth.W_yu])
    _, perm_u, signs_u = block_dist(est_u, ref_u)
    ok = perm_u == tuple(range(est_u.shape[1])) and all(s > 0 for s in signs_u)
    if estimate.p_v:
        _, perm_v, signs_v = block_dist(estimate.W_xv, truth.W_xv)
        ok = ok and perm_v == tuple(range(estimate.p_v)) and all(s > 0 for s in signs_v)
    return bool(ok)


# --------------------------------------------------------------------------
# sampling study
# --------------------------------------------------------------------------


@dataclass
class SamplingStudy:
    """Estimates over replicated synthetic datasets.

    ``estimates`` has shape ``(len(sample_sizes), n_replicates, n_params)``
    with NaN rows for replicates whose fit failed.
    """

    truth: CanonicalForm
    sample_sizes: list
    n_replicates: int
    seed: int
    param_names: list
    estimates: np.ndarray
    aligned: np.ndarray
    n_failed: list
    summary: dict = field(default_factory=dict)

    @property
    def truth_vector(self):
        return parameter_vector(self.truth.params)[1]


def replicate_seed(seed, size_index, replicate):
    return np.random.SeedSequence([int(seed), int(size_index), int(replicate)])


def _replicate(truth_params, n, seed_seq, config):
    data_seed, fit_seed = seed_seq.spawn(2)
    data = sample(truth_params, n, np.random.default_rng(data_seed))
    cfg = dataclasses.replace(config, seed=int(fit_seed.generate_state(1)[0]))
    try:
        res = fit(data, cfg)
    except (FitError, ValueError, np.linalg.LinAlgError) as exc:
        return None, str(exc)
    params = res.params if res.canonical else canonicalize(res.params, warn=False).params
    return params, ""


def _moments(values):
    mean = values.mean(axis=0)
    sd = values.std(axis=0, ddof=1)
    cen = values - mean
    m2 = np.mean(cen**2, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = np.mean(cen**3, axis=0) / m2**1.5
        kurt = np.mean(cen**4, axis=0) / m2**2 - 3.0
    return mean, sd, skew, kurt


def _histograms(est, names, bins):
    out = {}
    for j, name in enumerate(names):
        counts, edges = np.histogram(est[:, j], bins=bins)
        out[name] = {"counts": counts, "edges": edges}
    return out


def summarize(study, bins=20):
    """Per-parameter bias, spread and shape of the estimates at each sample size.

    Each size also carries a ``bins``-bin histogram per parameter for
    plotting.  Adds ``sd_ratio`` between consecutive sizes (``sqrt(n_k / n_{k+1})``
    under root-n consistency) and whether ``|bias|`` decreases
    monotonically across sizes.
    """
    truth = study.truth_vector
    per_size = []
    for k, n in enumerate(study.sample_sizes):
        est = study.estimates[k]
        est = est[~np.isnan(est).any(axis=1)]
        if len(est) == 0:
            per_size.append(None)
            continue
        if len(est) == 1:
            mean, sd = est[0], np.full(est.shape[1], np.nan)
            skew = kurt = np.full(est.shape[1], np.nan)
        else:
            mean, sd, skew, kurt = _moments(est)
        per_size.append({"n": n, "n_ok": int(len(est)), "mean": mean, "bias": mean - truth,
                         "sd": sd, "skew": skew, "excess_kurtosis": kurt,
                         "histograms": _histograms(est, study.param_names, bins)})
    summary = {"sizes": list(study.sample_sizes), "per_size": per_size,
               "param_names": list(study.param_names)}
    ok = [s for s in per_size if s is not None]
    if len(ok) > 1:
        summary["sd_ratio"] = [ok[i + 1]["sd"] / ok[i]["sd"] for i in range(len(ok) - 1)]
        abs_bias = np.array([np.abs(s["bias"]) for s in ok])
        summary["bias_monotone"] = np.all(np.diff(abs_bias, axis=0) < 0, axis=0)
    return summary


def run_sampling_study(truth, sizes, n_replicates, config, seed=0, n_jobs=1):
    """Refit the model on synthetic datasets drawn from ``truth``.

    Every replicate is fitted from the data-driven initialization and
    canonicalized; its seed is derived from ``(seed, size index,
    replicate index)`` so results do not depend on execution order.
    """
    if isinstance(truth, CanonicalForm):
        truth_form = truth
    else:
        truth_form = canonicalize(truth, warn=False)
    tp = truth_form.params
    if not check_identifiability(tp.p_x, tp.p_y, tp.dims):
        raise ValueError("truth must have identifiable dimensions")
    sizes = [int(n) for n in sizes]
    names, _ = parameter_vector(tp)
    jobs = [(k, r) for k in range(len(sizes)) for r in range(n_replicates)]
    args = [(tp, sizes[k], replicate_seed(seed, k, r), config) for k, r in jobs]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outs = list(pool.map(_replicate, *zip(*args), chunksize=8))
    else:
        outs = [_replicate(*a) for a in args]

    estimates = np.full((len(sizes), n_replicates, len(names)), np.nan)
    aligned = np.zeros((len(sizes), n_replicates), dtype=bool)
    n_failed = [0] * len(sizes)
    for (k, r), (params, err) in zip(jobs, outs):
        if params is None:
            n_failed[k] += 1
            logger.warning("replicate (n=%d, r=%d) failed: %s", sizes[k], r, err)
            continue
        estimates[k, r] = parameter_vector(params)[1]
        aligned[k, r] = alignment_is_identity(params, tp)
    study = SamplingStudy(truth_form, sizes, n_replicates, seed, names, estimates, aligned,
                          n_failed)
    study.summary = summarize(study)
    return study


def study_to_csv(study):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "replicate", "parameter", "value"])
    for k, n in enumerate(study.sample_sizes):
        for r in range(study.n_replicates):
            for j, name in enumerate(study.param_names):
                w.writerow([n, r, name, fmt(study.estimates[k, r, j])])
    return buf.getvalue()


def study_summary_json(study):
    doc = {
        "truth": study.truth.to_dict(),
        "sample_sizes": study.sample_sizes,
        "n_replicates": study.n_replicates,
        "seed": study.seed,
        "n_failed": study.n_failed,
        "aligned_fraction": [float(a.mean()) for a in study.aligned],
        "summary": study.summary,
    }
    return json.dumps(jsonable(doc), indent=2)


def write_study(study, csv_path=None, json_path=None):
    if csv_path:
        atomic_write_text(csv_path, study_to_csv(study))
    if json_path:
        atomic_write_text(json_path, study_summary_json(study) + "\n")


__all__ = [
    "inject_missing",
    "sample",
    "parameter_vector",
    "alignment_is_identity",
    "SamplingStudy",
    "replicate_seed",
    "run_sampling_study",
    "summarize",
    "study_to_csv",
    "study_summary_json",
    "write_study",
]
