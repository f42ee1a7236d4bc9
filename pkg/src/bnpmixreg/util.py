"""Shared numeric helpers, RNG stream plumbing, and the thread fan-out."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp_rows(a):
    """Row-wise log-sum-exp of a 2-d array, safe for -inf entries."""
    m = np.max(a, axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))
    return out


def logsumexp_vec(a):
    a = np.asarray(a, dtype=float)
    m = np.max(a) if a.size else -np.inf
    if not np.isfinite(m):
        return m
    with np.errstate(divide="ignore"):
        return m + np.log(np.sum(np.exp(a - m)))


def mvn_logpdf_chol(resid, chol_lower):
    """log N(resid | 0, L L^T) for resid with shape (..., d).

    The Cholesky factor is shared across leading axes; the solve is done once
    against the trailing dimension.
    """
    resid = np.asarray(resid, dtype=float)
    d = chol_lower.shape[0]
    flat = resid.reshape(-1, d)
    w = solve_triangular(chol_lower, flat.T, lower=True, check_finite=False)
    quad = np.sum(w * w, axis=0).reshape(resid.shape[:-1])
    logdet = 2.0 * np.sum(np.log(np.diag(chol_lower)))
    return -0.5 * (d * LOG_2PI + logdet + quad)


def chol_psd(mat, jitter=0.0):
    """Lower Cholesky with an optional diagonal jitter retry."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        if jitter <= 0.0:
            raise
        bump = jitter * np.trace(mat) / mat.shape[0]
        return np.linalg.cholesky(mat + bump * np.eye(mat.shape[0]))


def parallel_map(fn, items, threads=1):
    """Map preserving input order; a plain loop when threads <= 1.

    Results must not depend on scheduling: callers key all randomness by item
    index, never by execution order.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as ex:
        return list(ex.map(fn, items))


class RngPlan:
    """Deterministic generator factory keyed on (seed, purpose, *indices).

    Every stochastic stage gets its own stream so that outputs are identical
    at any thread count. Purpose codes are fixed for the life of the dump
    format.
    """

    MCMC = 0
    EXTEND = 1
    RESAMPLE = 2
    REJUVENATE = 3
    PREDICT = 4
    REPLICATE = 5
    PRIOR = 6
    SIMGEN = 7

    def __init__(self, seed):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = seed

    def rng(self, purpose, *key):
        entropy = (self.seed, int(purpose)) + tuple(int(k) for k in key)
        return np.random.default_rng(np.random.SeedSequence(entropy))
