"""Bijections onto unconstrained proposal space, with their log-Jacobians.

Covariance matrices travel as (log diag D, strict lower L) of the unit LDL
factorization. Latent rows travel through a per-dimension logistic-type map
keyed on the bound pattern; bounds may depend on earlier coordinates, so the
inverse is evaluated dimension by dimension against freshly derived bounds.
"""

import numpy as np
from scipy.special import expit

# interior clamp for the two-sided inverse; keeps y strictly inside (l, u)
_EDGE = 1e-12


def ldl_decompose(sigma):
    """Unit lower L and diagonal D with sigma = L diag(D) L^T."""
    chol = np.linalg.cholesky(sigma)
    s = np.diag(chol)
    L = chol / s[None, :]
    return L, s**2


def sigma_pack(sigma):
    """[log D, strict lower of L (row-major)]."""
    L, D = ldl_decompose(sigma)
    d = sigma.shape[0]
    idx = np.tril_indices(d, k=-1)
    return np.concatenate([np.log(D), L[idx]])


def sigma_unpack(t, d):
    t = np.asarray(t, dtype=float)
    D = np.exp(t[:d])
    L = np.eye(d)
    idx = np.tril_indices(d, k=-1)
    L[idx] = t[d:]
    return (L * D[None, :]) @ L.T


def log_abs_jacobian_sigma(D, d=None):
    """log |dt/d sigma| for the packing above: -sum_l (d+1-l) log D_l."""
    D = np.asarray(D, dtype=float)
    d = D.shape[0] if d is None else d
    weights = d + 1.0 - np.arange(1, d + 1)
    return float(-np.sum(weights * np.log(D)))


### sequential logistic map ---------------------------------------------------


def _forward_one(y, lo, hi):
    """Map one coordinate to the real line; returns (t, log dt/dy)."""
    if np.isfinite(lo) and np.isfinite(hi):
        t = np.log(y - lo) - np.log(hi - y)
        lj = np.log(hi - lo) - np.log(y - lo) - np.log(hi - y)
    elif np.isfinite(lo):
        t = np.log(y - lo)
        lj = -np.log(y - lo)
    elif np.isfinite(hi):
        t = -np.log(hi - y)
        lj = -np.log(hi - y)
    else:
        t, lj = y, 0.0
    return t, lj


def _inverse_one(t, lo, hi):
    """Inverse of _forward_one; returns (y, log dt/dy at y)."""
    if np.isfinite(lo) and np.isfinite(hi):
        frac = expit(t)
        frac = min(max(frac, _EDGE), 1.0 - _EDGE)
        y = lo + (hi - lo) * frac
        lj = np.log(hi - lo) - np.log(y - lo) - np.log(hi - y)
    elif np.isfinite(lo):
        y = lo + np.exp(min(t, 700.0))
        lj = -np.log(y - lo)
    elif np.isfinite(hi):
        y = hi - np.exp(min(-t, 700.0))
        lj = -np.log(hi - y)
    else:
        y, lj = t, 0.0
    return y, lj


def seq_logistic_forward(y, bounds, free=None):
    """Transform the free coordinates of a latent row.

    Returns (t, log_jac) where log_jac is log |dt/dy| of the full map (the
    Jacobian is lower triangular, so only diagonal terms enter).
    """
    y = np.asarray(y, dtype=float)
    dims = range(y.shape[0]) if free is None else free
    t = []
    log_jac = 0.0
    for ell in dims:
        ti, lj = _forward_one(y[ell], bounds.l[ell], bounds.u[ell])
        t.append(ti)
        log_jac += lj
    return np.array(t), float(log_jac)


def seq_logistic_inverse(t, bounds_fn, d, free=None, y_fixed=None):
    """Invert dimension by dimension, re-deriving bounds from the prefix.

    bounds_fn(ell, y_partial) -> (lo, hi) for dimension ell given the already
    inverted coordinates; y_fixed supplies pinned coordinates. Returns
    (y, log_jac). Raises on an empty interval.
    """
    t = np.asarray(t, dtype=float)
    free = list(range(d)) if free is None else list(free)
    y = np.zeros(d) if y_fixed is None else np.asarray(y_fixed, dtype=float).copy()
    log_jac = 0.0
    pos = 0
    for ell in range(d):
        if ell not in free:
            continue
        lo, hi = bounds_fn(ell, y)
        if hi <= lo:
            raise ValueError(f"empty latent interval for dimension {ell}")
        y[ell], lj = _inverse_one(t[pos], lo, hi)
        log_jac += lj
        pos += 1
    return y, float(log_jac)


def log_abs_jacobian_y(y, bounds, free=None):
    """log |dt/dy| at y for the current bounds (diagonal terms only)."""
    _, log_jac = seq_logistic_forward(y, bounds, free)
    return log_jac


### array forms for the row sweep ---------------------------------------------


def forward_rows(Y, L, U, free_dims):
    """Vectorized forward over rows; L and U are (n, d) bound arrays."""
    n = Y.shape[0]
    df = len(free_dims)
    T = np.empty((n, df))
    logJ = np.zeros(n)
    for pos, ell in enumerate(free_dims):
        y = Y[:, ell]
        lo = L[:, ell]
        hi = U[:, ell]
        fin_l = np.isfinite(lo)
        fin_u = np.isfinite(hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            both = fin_l & fin_u
            t = np.where(both, np.log(y - lo) - np.log(hi - y), 0.0)
            lj = np.where(both, np.log(hi - lo) - np.log(y - lo) - np.log(hi - y), 0.0)
            only_l = fin_l & ~fin_u
            t = np.where(only_l, np.log(y - lo), t)
            lj = np.where(only_l, -np.log(y - lo), lj)
            only_u = ~fin_l & fin_u
            t = np.where(only_u, -np.log(hi - y), t)
            lj = np.where(only_u, -np.log(hi - y), lj)
            neither = ~fin_l & ~fin_u
            t = np.where(neither, y, t)
        T[:, pos] = t
        logJ += lj
    return T, logJ


def inverse_rows(T, ell_pos, lo, hi):
    """Invert one free dimension across rows. Returns (y, log_jac_term, bad)."""
    t = T[:, ell_pos]
    fin_l = np.isfinite(lo)
    fin_u = np.isfinite(hi)
    y = np.empty_like(t)
    lj = np.zeros_like(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        both = fin_l & fin_u
        frac = np.clip(expit(t), _EDGE, 1.0 - _EDGE)
        y = np.where(both, lo + (hi - lo) * frac, y)
        only_l = fin_l & ~fin_u
        y = np.where(only_l, lo + np.exp(np.minimum(t, 700.0)), y)
        only_u = ~fin_l & fin_u
        y = np.where(only_u, hi - np.exp(np.minimum(-t, 700.0)), y)
        neither = ~fin_l & ~fin_u
        y = np.where(neither, t, y)
        lj = np.where(both, np.log(hi - lo) - np.log(y - lo) - np.log(hi - y), lj)
        lj = np.where(only_l, -np.log(y - lo), lj)
        lj = np.where(only_u, -np.log(hi - y), lj)
    bad = ~np.isfinite(y)
    bad |= fin_l & (y <= lo)
    bad |= fin_u & (y >= hi)
    bad |= ~np.isfinite(lj)
    return y, lj, bad
