"""Adaptive truncation growth by sequential Monte Carlo.

Starting from an equally weighted MCMC sample at truncation J0, each
increment appends a prior-drawn component to every particle, reweights by
the likelihood ratio of the extended mixture, resamples systematically when
the effective sample size falls below a threshold, and rejuvenates resampled
particles with a few frozen MH sweeps. Growth stops once the increment
discrepancy stays below delta for a fixed number of consecutive steps.
"""

import csv
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import links as lk
from .data import ValidationError
from .mcmc import BlockAdaptState, RowAdaptState, _Workspace
from .model import sample_component
from .particles import ParticleSet
from .transforms import forward_rows, sigma_pack
from .util import RngPlan, logsumexp_vec, mvn_logpdf_chol, parallel_map

COV_FLOOR = 1e-8


class NumericFailure(RuntimeError):
    """The particle system degenerated beyond recovery."""


@dataclass
class StopRule:
    """Stopping configuration for the truncation loop.

    kind: "ess" compares effective sample sizes before/after an increment;
    "cess" uses the conditional effective sample size of the increment.
    delta_frac and consecutive define the stability window; m_star counts
    rejuvenation sweeps; resample_frac sets the ESS/M resampling trigger.
    """

    kind: str = "ess"
    delta_frac: float = 0.01
    consecutive: int = 4
    m_star: int = 3
    resample_frac: float = 0.5
    max_extra: int = 100

    def __post_init__(self):
        if self.kind not in ("ess", "cess"):
            raise ValidationError(f"unknown stop rule {self.kind!r}")
        if not 0 < self.delta_frac or self.consecutive < 1 or self.m_star < 0:
            raise ValidationError("bad stop rule settings")


def ess(log_weights):
    """exp(2 lse(w) - lse(2w)) on max-shifted logs; exactly shift invariant."""
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not finite.any():
        return 0.0
    a = lw - np.max(lw[finite])
    return float(np.exp(2.0 * logsumexp_vec(a) - logsumexp_vec(2.0 * a)))


def cess(prev_log_norm, log_ratio):
    """Conditional ESS of one increment under the previous normalized weights."""
    p = np.asarray(prev_log_norm, dtype=float)
    r = np.asarray(log_ratio, dtype=float)
    M = p.shape[0]
    finite = np.isfinite(p + r)
    if not finite.any():
        return 0.0
    # max-shift the ratio so constant offsets cancel before any rounding
    r = r - np.max(r[finite])
    with np.errstate(invalid="ignore"):
        num = 2.0 * logsumexp_vec(p + r)
        den = logsumexp_vec(p + 2.0 * r)
    if not np.isfinite(num - den):
        return 0.0
    return float(M * np.exp(num - den))


### caches -----------------------------------------------------------------


def refresh_likelihood_caches(pset, dataset, hyper, link_specs):
    """Rebuild per-particle row reductions and remaining stick mass."""
    M = pset.M
    n = dataset.n
    pset.lse_a = np.empty((M, n))
    pset.lse_ab = np.empty((M, n))
    pset.log_remain = np.empty(M)
    for m in range(M):
        state = pset.get_state(m)
        ws = _Workspace(state, dataset, hyper, link_specs)
        pset.lse_a[m] = ws.lseA
        pset.lse_ab[m] = ws.lseAB
        with np.errstate(divide="ignore"):
            pset.log_remain[m] = float(np.sum(np.log1p(-pset.v[m])))
        pset.y[m] = state.y  # identity dims get pinned on workspace entry


def _append_component(pset, arrays):
    """Grow every stacked parameter array by one component column."""
    v_new, mu_new, tau_new, rho_new, beta_new, sigma_new = arrays
    pset.v = np.concatenate([pset.v, v_new[:, None]], axis=1)
    pset.psi_mu = np.concatenate([pset.psi_mu, mu_new[:, None, :]], axis=1)
    pset.psi_tau = np.concatenate([pset.psi_tau, tau_new[:, None, :]], axis=1)
    pset.psi_rho = np.concatenate([pset.psi_rho, rho_new[:, None, :]], axis=1)
    pset.beta = np.concatenate([pset.beta, beta_new[:, None, :, :]], axis=1)
    pset.sigma = np.concatenate([pset.sigma, sigma_new[:, None, :, :]], axis=1)


def extend_truncation(pset, dataset, hyper, link_specs, rng):
    """Append one prior-drawn component per particle; reweight in place.

    Returns the per-particle log ratio of the extended to the previous
    truncated likelihood. NaN ratios mark dead particles at -inf weight.
    """
    if pset.lse_a is None:
        refresh_likelihood_caches(pset, dataset, hyper, link_specs)
    M = pset.M
    p = hyper.p
    X = dataset.X
    v_new = np.empty(M)
    mu_new = np.empty((M, p))
    tau_new = np.empty((M, p))
    rho_new = np.empty((M, hyper.varrho.shape[0]))
    beta_new = np.empty((M, hyper.beta0.shape[0], hyper.d))
    sigma_new = np.empty((M, hyper.d, hyper.d))
    delta = np.empty(M)
    clipped = 0
    for m in range(M):
        beta_m, sigma_m, mu_m, tau_m, rho_m = sample_component(hyper, rng)
        v_m = float(rng.beta(hyper.zeta[0], hyper.zeta[1]))
        if v_m < 1e-300 or v_m > 1.0 - 1e-16:
            v_m = float(np.clip(v_m, 1e-300, 1.0 - 1e-16))
            clipped += 1
        v_new[m] = v_m
        mu_new[m] = mu_m
        tau_new[m] = tau_m
        rho_new[m] = rho_m
        beta_new[m] = beta_m
        sigma_new[m] = sigma_m

        log_w_new = np.log(v_m) + pset.log_remain[m]
        gcol = _kernel_col(X, p, mu_m, tau_m, rho_m)
        chol = np.linalg.cholesky(sigma_m)
        bcol = mvn_logpdf_chol(pset.y[m] - X @ beta_m, chol)
        a_new = log_w_new + gcol
        lse_a = np.logaddexp(pset.lse_a[m], a_new)
        lse_ab = np.logaddexp(pset.lse_ab[m], a_new + bcol)
        delta[m] = float(np.sum((lse_ab - lse_a) - (pset.lse_ab[m] - pset.lse_a[m])))
        pset.lse_a[m] = lse_a
        pset.lse_ab[m] = lse_ab
        pset.log_remain[m] += np.log1p(-v_m)
    if clipped:
        warnings.warn(f"clipped {clipped} stick draws away from the unit interval edge")
    _append_component(pset, (v_new, mu_new, tau_new, rho_new, beta_new, sigma_new))
    bad = ~np.isfinite(delta)
    if bad.any():
        delta = np.where(bad, -np.inf, delta)
    pset.log_weights = pset.log_weights + delta
    return delta


def _kernel_col(X, p, mu, tau, rho):
    from .util import LOG_2PI

    n = X.shape[0]
    out = np.zeros(n)
    if p:
        Xc = X[:, 1 : p + 1]
        out += np.sum(0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (Xc - mu) ** 2, axis=1)
    if rho.size:
        Xb = X[:, p + 1 :]
        with np.errstate(divide="ignore"):
            out += Xb @ np.log(rho) + (1.0 - Xb) @ np.log1p(-rho)
    return out


### resampling and rejuvenation ----------------------------------------------


def systematic_resample(pset, rng):
    """One uniform on the 1/M grid; equal weights afterwards."""
    M = pset.M
    w = pset.weights()
    c = np.cumsum(w)
    c[-1] = 1.0
    u0 = rng.random() / M
    pts = u0 + np.arange(M) / M
    idx = np.searchsorted(c, pts, side="left")
    pset.reindex(idx)
    return idx


def _population_block_proposals(pset, free_dims, dataset, link_specs):
    """Frozen proposal table from the spread of the current particle cloud.

    Each block's proposal covariance is the across-particle covariance of its
    transformed value (plus a floor), which is well defined for components
    appended after the MCMC stage and adapts to the local posterior scale.
    """
    M, J = pset.M, pset.J
    p = pset.p
    d = pset.d
    q1 = pset.beta.shape[2]
    nb = pset.psi_rho.shape[2]
    table = {}

    def cov_of(ts):
        ts = ts.reshape(M, -1)
        mean = ts.mean(axis=0)
        dev = ts - mean
        cov = dev.T @ dev / max(M - 1, 1)
        cov += COV_FLOOR * np.eye(cov.shape[0])
        st = BlockAdaptState(xi=cov, running_mean=mean.copy(), scale=1.0)
        return st

    split = q1 * d > 200
    for j in range(J):
        if split:
            for col in range(d):
                table[("beta", j, col)] = cov_of(pset.beta[:, j, :, col])
        else:
            table[("beta", j)] = cov_of(pset.beta[:, j].reshape(M, -1))
        packs = np.stack([sigma_pack(pset.sigma[m, j]) for m in range(M)])
        table[("sigma", j)] = cov_of(packs)
        if p:
            table[("psi", j)] = cov_of(
                np.concatenate([pset.psi_mu[:, j], np.log(pset.psi_tau[:, j])], axis=1)
            )
        if nb:
            r = np.clip(pset.psi_rho[:, j], 1e-12, 1.0 - 1e-12)
            table[("rho", j)] = cov_of(np.log(r) - np.log1p(-r))
        vv = np.clip(pset.v[:, j], 1e-12, 1.0 - 1e-12)
        table[("v", j)] = cov_of((np.log(vv) - np.log1p(-vv))[:, None])

    if free_dims:
        df = len(free_dims)
        n = pset.n
        T_all = np.empty((M, n, df))
        for m in range(M):
            Y = pset.y[m]
            L = np.empty((n, d))
            U = np.empty((n, d))
            for ell in range(d):
                lo, hi, _ = lk.bounds_dim_arrays(
                    link_specs, ell, dataset.Z, dataset.censored, dataset.X, Y
                )
                L[:, ell] = lo
                U[:, ell] = hi
            T_all[m], _ = forward_rows(Y, L, U, free_dims)
        mean = T_all.mean(axis=0)
        dev = T_all - mean[None]
        cov = np.einsum("mni,mnj->nij", dev, dev) / max(M - 1, 1)
        cov += COV_FLOOR * np.eye(df)[None]
        rows = RowAdaptState(n, df)
        rows.xi = cov
        rows.running_mean = mean
        table["rows"] = rows
    return table


def rejuvenate(pset, dataset, hyper, link_specs, m_star, round_idx, threads=1):
    """m_star frozen MH sweeps per particle; identity when m_star == 0."""
    if m_star == 0:
        return pset
    free_dims = [ell for ell, s in enumerate(link_specs) if s.kind != lk.IDENTITY]
    table = _population_block_proposals(pset, free_dims, dataset, link_specs)
    plan = RngPlan(pset.seed)

    def work(m):
        state = pset.get_state(m)
        ws = _Workspace(state, dataset, hyper, link_specs)
        rng = plan.rng(RngPlan.REJUVENATE, round_idx, m)
        # fresh per-particle copies so the frozen table stays shared-read-only
        local = {}
        for key, st in table.items():
            if key == "rows":
                la = RowAdaptState(ws.n, st.df)
                la.xi = st.xi
                la.running_mean = st.running_mean
                local[key] = la
            else:
                local[key] = st
        for _ in range(m_star):
            ws.sweep(local, rng, update_adapt=False)
        return state, ws.lseA, ws.lseAB

    results = parallel_map(work, range(pset.M), threads)
    for m, (state, lse_a, lse_ab) in enumerate(results):
        pset.set_state(m, state)
        pset.lse_a[m] = lse_a
        pset.lse_ab[m] = lse_ab
        with np.errstate(divide="ignore"):
            pset.log_remain[m] = float(np.sum(np.log1p(-pset.v[m])))
    pset.rejuv_round = round_idx
    return pset


### the adaptive loop ----------------------------------------------------------


def adaptive_truncation_run(
    pset, dataset, hyper, link_specs, stop_rule, threads=1, log_path=None
):
    """Grow the truncation until the stop rule fires; returns (pset, log rows).

    Each log row records the truncation level after the increment, the ESS
    and CESS of the increment (pre-resampling), the discrepancy D, whether a
    resampling (with rejuvenation) happened, and the wall time in seconds.
    """
    link_specs = lk.validate_link_specs(link_specs)
    M = pset.M
    delta_thresh = stop_rule.delta_frac * M
    plan = RngPlan(pset.seed)
    rng_extend = plan.rng(RngPlan.EXTEND)
    rng_resample = plan.rng(RngPlan.RESAMPLE)
    refresh_likelihood_caches(pset, dataset, hyper, link_specs)
    j_start = pset.J
    ess_prev = ess(pset.log_weights)
    streak = 0
    rows = []
    round_idx = 0
    while True:
        round_idx += 1
        t0 = time.perf_counter()
        prev_norm = pset.normalized_log_weights()
        delta = extend_truncation(pset, dataset, hyper, link_specs, rng_extend)
        dead = ~np.isfinite(pset.log_weights)
        if dead.mean() > 0.10:
            raise NumericFailure(
                f"{int(dead.sum())} of {M} particles died at truncation {pset.J}"
            )
        ess_new = ess(pset.log_weights)
        cess_new = cess(prev_norm, delta)
        if stop_rule.kind == "ess":
            D = abs(ess_prev - ess_new)
        else:
            D = abs(M - cess_new)
        resampled = ess_new < stop_rule.resample_frac * M
        if resampled:
            systematic_resample(pset, rng_resample)
            rejuvenate(pset, dataset, hyper, link_specs, stop_rule.m_star, round_idx, threads)
        rows.append(
            {
                "J": pset.J,
                "ess": ess_new,
                "cess": cess_new,
                "D": D,
                "resampled": int(resampled),
                "wall_s": time.perf_counter() - t0,
            }
        )
        streak = streak + 1 if D < delta_thresh else 0
        ess_prev = float(M) if resampled else ess_new
        if streak >= stop_rule.consecutive:
            break
        if pset.J - j_start >= stop_rule.max_extra:
            raise NumericFailure(
                f"no stabilization after {stop_rule.max_extra} increments"
            )
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["J", "ess", "cess", "D", "resampled", "wall_s"])
            for r in rows:
                wr.writerow(
                    [r["J"], repr(r["ess"]), repr(r["cess"]), repr(r["D"]),
                     r["resampled"], repr(r["wall_s"])]
                )
    return pset, rows
