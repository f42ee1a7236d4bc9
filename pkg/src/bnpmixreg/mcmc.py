"""Blocked adaptive random-walk sampler for the truncated mixture posterior.

Every block is updated by a random-walk proposal on a transformed scale with
a Robbins-Monro step size driving acceptance toward A0_TARGET and a running
covariance estimate shaping the proposal. Latent rows are proposed jointly
across observations: rows are conditionally independent given the component
parameters, so one vectorized accept/reject pass per sweep updates them all.
"""

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from . import links as lk
from .data import ValidationError
from .model import (
    MixtureState,
    invwishart_logpdf,
    kernel_log_g_matrix,
    log_stick_weights,
    matrix_normal_logpdf,
    normal_gamma_logpdf,
    sample_base_measure,
)
from .particles import ParticleSet
from .transforms import (
    forward_rows,
    inverse_rows,
    log_abs_jacobian_sigma,
    sigma_pack,
    sigma_unpack,
)
from .util import LOG_2PI, RngPlan, logsumexp_rows, mvn_logpdf_chol

A0_TARGET = 0.234
ADAPT_DECAY = 0.6
ADAPT_C0 = 1.0
COV_FLOOR = 1e-8
BETA_SPLIT_LIMIT = 200
_SCALE_LIM = (1e-6, 1e6)


### adaptation ----------------------------------------------------------------


@dataclass
class BlockAdaptState:
    """Proposal state for one parameter block.

    xi is the running covariance estimate of the transformed block; the
    proposal covariance is scale * (2.4^2 / dim) * (xi + floor I).
    """

    xi: np.ndarray
    running_mean: np.ndarray
    scale: float = 1.0
    accept_count: int = 0
    step_count: int = 0

    @classmethod
    def fresh(cls, pdim, init_var=1e-2):
        return cls(xi=init_var * np.eye(pdim), running_mean=np.zeros(pdim))

    @property
    def pdim(self):
        return self.running_mean.shape[0]

    def proposal_chol(self):
        cov = self.scale * (2.4**2 / self.pdim) * (self.xi + COV_FLOOR * np.eye(self.pdim))
        return np.linalg.cholesky(cov)

    def update(self, t_new, alpha, accepted):
        self.step_count += 1
        self.accept_count += bool(accepted)
        g = ADAPT_C0 * self.step_count ** (-ADAPT_DECAY)
        self.scale = float(np.clip(self.scale * np.exp(g * (alpha - A0_TARGET)), *_SCALE_LIM))
        self.running_mean = self.running_mean + g * (t_new - self.running_mean)
        dev = t_new - self.running_mean
        self.xi = self.xi + g * (np.outer(dev, dev) - self.xi)


class RowAdaptState:
    """Per-row proposal state for the vectorized latent-row block."""

    def __init__(self, n, df, init_var=0.25):
        self.xi = np.tile(init_var * np.eye(df), (n, 1, 1))
        self.running_mean = np.zeros((n, df))
        self.scale = np.ones(n)
        self.accept_count = np.zeros(n, dtype=int)
        self.step_count = 0
        self.df = df

    def proposal_chols(self):
        eye = np.eye(self.df)
        cov = self.scale[:, None, None] * (2.4**2 / self.df) * (self.xi + COV_FLOOR * eye)
        return np.linalg.cholesky(cov)

    def update(self, t_new, alpha, accepted):
        self.step_count += 1
        g = ADAPT_C0 * self.step_count ** (-ADAPT_DECAY)
        self.scale = np.clip(self.scale * np.exp(g * (alpha - A0_TARGET)), *_SCALE_LIM)
        self.running_mean += g * (t_new - self.running_mean)
        dev = t_new - self.running_mean
        self.xi += g * (dev[:, :, None] * dev[:, None, :] - self.xi)
        self.accept_count += accepted


def propose_and_accept(t, log_target, adapt, rng, current_lp=None, update=True):
    """One random-walk step on a transformed block.

    log_target must already include the log-Jacobian of the block transform.
    Returns (t_new, lp_new, accepted, alpha).
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if current_lp is None:
        current_lp = float(log_target(t))
    step = adapt.proposal_chol() @ rng.standard_normal(t.size)
    t_star = t + step
    lp_star = float(log_target(t_star))
    if np.isfinite(lp_star):
        log_ratio = lp_star - current_lp
    else:
        log_ratio = -np.inf
    alpha = float(np.exp(min(0.0, log_ratio))) if np.isfinite(log_ratio) else (
        1.0 if log_ratio > 0 else 0.0
    )
    accepted = np.log(rng.random()) < log_ratio
    t_new = t_star if accepted else t
    lp_new = lp_star if accepted else current_lp
    if update:
        adapt.update(t_new, alpha, accepted)
    return t_new, lp_new, bool(accepted), alpha


### sweep workspace -----------------------------------------------------------

_NEG_INF = -np.inf


class _Workspace:
    """Mutable caches for one chain state against one dataset.

    Maintains, per observation i and component j, the log kernel value, the
    log stick weight, and the component log density of the latent row, plus
    row-wise log-sum-exp reductions of the tilted and untilted columns.
    """

    def __init__(self, state, dataset, hyper, link_specs):
        self.state = state
        self.hyper = hyper
        self.links = tuple(link_specs)
        self.X = dataset.X
        self.Z = dataset.Z
        self.C = dataset.censored
        self.p = dataset.schema.p
        self.n, self.d = dataset.Z.shape
        self.q1 = dataset.X.shape[1]
        self.Xc = self.X[:, 1 : self.p + 1]
        self.Xb = self.X[:, self.p + 1 :]
        self.free_dims = [ell for ell, s in enumerate(self.links) if s.kind != lk.IDENTITY]
        self.pinned_dims = [ell for ell, s in enumerate(self.links) if s.kind == lk.IDENTITY]
        if self.pinned_dims:
            state.y[:, self.pinned_dims] = self.Z[:, self.pinned_dims]
        self.refresh()

    ### cache construction

    def refresh(self):
        s = self.state
        J = s.J
        with np.errstate(divide="ignore"):
            self.logv = np.log(s.v)
            self.log1mv = np.log1p(-s.v)
        self.logw = self._stick_from_logs()
        self.logGc = self._cont_matrix(s.psi_mu, s.psi_tau)
        self.logGb = self._bern_matrix(s.psi_rho)
        self.sig_chol = [np.linalg.cholesky(s.sigma[j]) for j in range(J)]
        self.means = np.stack([self.X @ s.beta[j] for j in range(J)]) if J else np.zeros((0, self.n, self.d))
        self.B = np.empty((self.n, J))
        for j in range(J):
            self.B[:, j] = mvn_logpdf_chol(s.y - self.means[j], self.sig_chol[j])
        self._rowsums()

    def _stick_from_logs(self):
        prefix = np.concatenate(([0.0], np.cumsum(self.log1mv[:-1])))
        return self.logv + prefix

    def _cont_matrix(self, mu, tau):
        J = mu.shape[0]
        out = np.zeros((self.n, J))
        if self.p:
            diff = self.Xc[:, None, :] - mu[None, :, :]
            out += np.sum(
                0.5 * (np.log(tau) - LOG_2PI)[None, :, :] - 0.5 * tau[None, :, :] * diff**2,
                axis=2,
            )
        return out

    def _bern_matrix(self, rho):
        J = rho.shape[0]
        out = np.zeros((self.n, J))
        if rho.shape[1]:
            with np.errstate(divide="ignore"):
                out += self.Xb @ np.log(rho).T + (1.0 - self.Xb) @ np.log1p(-rho).T
        return out

    def _rowsums(self):
        A = self.logGc + self.logGb + self.logw[None, :]
        self.lseA = logsumexp_rows(A)
        self.lseAB = logsumexp_rows(A + self.B)

    def _A(self):
        return self.logGc + self.logGb + self.logw[None, :]

    def loglik(self):
        return float(np.sum(self.lseAB - self.lseA))

    def _rest(self, mat, j):
        tmp = mat.copy()
        tmp[:, j] = _NEG_INF
        return logsumexp_rows(tmp)

    ### component blocks

    def _cont_col(self, mu, tau):
        if not self.p:
            return np.zeros(self.n)
        return np.sum(
            0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (self.Xc - mu) ** 2, axis=1
        )

    def _bern_col_from_logits(self, t):
        if t.size == 0:
            return np.zeros(self.n)
        return self.Xb @ log_expit(t) + (1.0 - self.Xb) @ log_expit(-t)

    def update_beta(self, j, adapt_for, rng, update_adapt):
        s = self.state
        hy = self.hyper
        A = self._A()
        rest_ab = self._rest(A + self.B, j)
        acol = A[:, j]
        chol_j = self.sig_chol[j]
        full = s.beta[j]
        split = self.q1 * self.d > BETA_SPLIT_LIMIT
        cols = [None] if not split else list(range(self.d))
        accepted_any = False
        n_acc = 0
        for col in cols:
            if col is None:
                t_cur = full.ravel().copy()

                def build(t):
                    return t.reshape(self.q1, self.d)

                key = ("beta", j)
            else:
                t_cur = full[:, col].copy()

                def build(t, _c=col):
                    b = full.copy()
                    b[:, _c] = t
                    return b

                key = ("beta", j, col)

            def log_target(t):
                b = build(t)
                bcol = mvn_logpdf_chol(s.y - self.X @ b, chol_j)
                mix = float(np.sum(np.logaddexp(rest_ab, acol + bcol)))
                return mix + matrix_normal_logpdf(b, hy.beta0, hy.U_chol, chol_j)

            adapt = adapt_for(key, t_cur.size, 1e-4)
            t_new, _, acc, _ = propose_and_accept(
                t_cur, log_target, adapt, rng, update=update_adapt
            )
            if acc:
                full = build(t_new).copy()
                accepted_any = True
                n_acc += 1
        if accepted_any:
            s.beta[j] = full
            self.means[j] = self.X @ full
            self.B[:, j] = mvn_logpdf_chol(s.y - self.means[j], self.sig_chol[j])
            self.lseAB = logsumexp_rows(self._A() + self.B)
        return n_acc, len(cols)

    def update_sigma(self, j, adapt_for, rng, update_adapt):
        s = self.state
        hy = self.hyper
        d = self.d
        A = self._A()
        rest_ab = self._rest(A + self.B, j)
        acol = A[:, j]
        resid = s.y - self.means[j]
        t_cur = sigma_pack(s.sigma[j])

        def log_target(t):
            with np.errstate(over="ignore"):
                sig = sigma_unpack(t, d)
            if not np.all(np.isfinite(sig)):
                return _NEG_INF
            try:
                chol = np.linalg.cholesky(sig)
            except np.linalg.LinAlgError:
                return _NEG_INF
            bcol = mvn_logpdf_chol(resid, chol)
            mix = float(np.sum(np.logaddexp(rest_ab, acol + bcol)))
            pr = invwishart_logpdf(sig, hy.sigma0, hy.nu)
            pr += matrix_normal_logpdf(s.beta[j], hy.beta0, hy.U_chol, chol)
            D = np.exp(t[:d])
            return mix + pr - log_abs_jacobian_sigma(D)

        adapt = adapt_for(("sigma", j), t_cur.size, 1e-2)
        t_new, _, acc, _ = propose_and_accept(t_cur, log_target, adapt, rng, update=update_adapt)
        if acc:
            s.sigma[j] = sigma_unpack(t_new, d)
            self.sig_chol[j] = np.linalg.cholesky(s.sigma[j])
            self.B[:, j] = mvn_logpdf_chol(s.y - self.means[j], self.sig_chol[j])
            self.lseAB = logsumexp_rows(self._A() + self.B)
        return acc

    def update_psi(self, j, adapt_for, rng, update_adapt):
        if not self.p:
            return None
        s = self.state
        hy = self.hyper
        A = self._A()
        rest_ab = self._rest(A + self.B, j)
        rest_a = self._rest(A, j)
        bcol = self.B[:, j]
        gb = self.logGb[:, j]
        logw_j = self.logw[j]
        t_cur = np.concatenate([s.psi_mu[j], np.log(s.psi_tau[j])])

        def log_target(t):
            mu = t[: self.p]
            logtau = t[self.p :]
            if np.any(logtau > 700):
                return _NEG_INF
            tau = np.exp(logtau)
            anew = logw_j + self._cont_col(mu, tau) + gb
            mix = float(
                np.sum(np.logaddexp(rest_ab, anew + bcol) - np.logaddexp(rest_a, anew))
            )
            pr = normal_gamma_logpdf(mu, tau, hy.mu0, hy.u, hy.alpha, hy.gamma)
            return mix + pr + float(np.sum(logtau))

        adapt = adapt_for(("psi", j), t_cur.size, 1e-2)
        t_new, _, acc, _ = propose_and_accept(t_cur, log_target, adapt, rng, update=update_adapt)
        if acc:
            s.psi_mu[j] = t_new[: self.p]
            s.psi_tau[j] = np.exp(t_new[self.p :])
            self.logGc[:, j] = self._cont_col(s.psi_mu[j], s.psi_tau[j])
            self._rowsums()
        return acc

    def update_rho(self, j, adapt_for, rng, update_adapt):
        nb = self.state.psi_rho.shape[1]
        if not nb:
            return None
        s = self.state
        hy = self.hyper
        A = self._A()
        rest_ab = self._rest(A + self.B, j)
        rest_a = self._rest(A, j)
        bcol = self.B[:, j]
        gc = self.logGc[:, j]
        logw_j = self.logw[j]
        rho = s.psi_rho[j]
        t_cur = np.log(rho) - np.log1p(-rho)
        a_par = hy.varrho[:, 0]
        b_par = hy.varrho[:, 1]

        def log_target(t):
            lr = log_expit(t)
            l1r = log_expit(-t)
            anew = logw_j + gc + self._bern_col_from_logits(t)
            mix = float(
                np.sum(np.logaddexp(rest_ab, anew + bcol) - np.logaddexp(rest_a, anew))
            )
            pr = float(np.sum((a_par - 1.0) * lr + (b_par - 1.0) * l1r))
            return mix + pr + float(np.sum(lr + l1r))

        adapt = adapt_for(("rho", j), t_cur.size, 1e-2)
        t_new, _, acc, _ = propose_and_accept(t_cur, log_target, adapt, rng, update=update_adapt)
        if acc:
            s.psi_rho[j] = expit(t_new)
            self.logGb[:, j] = self._bern_col_from_logits(t_new)
            self._rowsums()
        return acc

    def update_v(self, j, adapt_for, rng, update_adapt):
        s = self.state
        z1, z2 = self.hyper.zeta
        G = self.logGc + self.logGb
        t_cur = np.array([self.logv[j] - self.log1mv[j]])

        def log_target(t):
            lv = float(log_expit(t[0]))
            l1v = float(log_expit(-t[0]))
            logv = self.logv.copy()
            log1mv = self.log1mv.copy()
            logv[j] = lv
            log1mv[j] = l1v
            prefix = np.concatenate(([0.0], np.cumsum(log1mv[:-1])))
            logw = logv + prefix
            A = G + logw[None, :]
            mix = float(np.sum(logsumexp_rows(A + self.B) - logsumexp_rows(A)))
            pr = (z1 - 1.0) * lv + (z2 - 1.0) * l1v
            return mix + pr + lv + l1v

        adapt = adapt_for(("v", j), 1, 1e-2)
        t_new, _, acc, _ = propose_and_accept(t_cur, log_target, adapt, rng, update=update_adapt)
        if acc:
            s.v[j] = float(expit(t_new[0]))
            self.logv[j] = float(log_expit(t_new[0]))
            self.log1mv[j] = float(log_expit(-t_new[0]))
            self.logw = self._stick_from_logs()
            self._rowsums()
        return acc

    ### latent rows

    def update_rows(self, row_adapt, rng, update_adapt):
        free = self.free_dims
        n = self.n
        if not free or n == 0:
            return 1.0
        s = self.state
        Y = s.y
        df = len(free)
        L = np.empty((n, self.d))
        U = np.empty((n, self.d))
        for ell in range(self.d):
            lo, hi, _ = lk.bounds_dim_arrays(self.links, ell, self.Z, self.C, self.X, Y)
            L[:, ell] = lo
            U[:, ell] = hi
        T, logJ_cur = forward_rows(Y, L, U, free)
        chols = row_adapt.proposal_chols()
        eps = np.einsum("nij,nj->ni", chols, rng.standard_normal((n, df)))
        T_star = T + eps
        Ystar = Y.copy()
        logJ_star = np.zeros(n)
        dead = np.zeros(n, dtype=bool)
        for pos, ell in enumerate(free):
            lo, hi, dd = lk.bounds_dim_arrays(self.links, ell, self.Z, self.C, self.X, Ystar)
            yell, lj, bad = inverse_rows(T_star, pos, lo, hi)
            Ystar[:, ell] = np.where(bad, Y[:, ell], yell)
            logJ_star += np.where(bad, 0.0, lj)
            dead |= dd | bad
        J = s.J
        Bstar = np.empty((n, J))
        for j in range(J):
            Bstar[:, j] = mvn_logpdf_chol(Ystar - self.means[j], self.sig_chol[j])
        A = self._A()
        lseAB_star = logsumexp_rows(A + Bstar)
        with np.errstate(invalid="ignore"):
            log_ratio = (lseAB_star - self.lseAB) + (logJ_cur - logJ_star)
        log_ratio = np.where(dead | ~np.isfinite(log_ratio), _NEG_INF, log_ratio)
        accept = np.log(rng.random(n)) < log_ratio
        if accept.any():
            Y[accept] = Ystar[accept]
            self.B[accept] = Bstar[accept]
            self.lseAB[accept] = lseAB_star[accept]
        alpha = np.exp(np.minimum(log_ratio, 0.0))
        alpha = np.where(np.isfinite(log_ratio), alpha, 0.0)
        T_new = np.where(accept[:, None], T_star, T)
        if update_adapt:
            row_adapt.update(T_new, alpha, accept)
        return float(np.mean(accept))

    ### full sweep

    def sweep(self, adapt_table, rng, update_adapt=True):
        """One pass over all blocks; returns acceptance counters by kind."""
        stats = {k: [0, 0] for k in ("beta", "sigma", "psi", "rho", "v")}

        def adapt_for(key, pdim, init_var):
            st = adapt_table.get(key)
            if st is None:
                st = BlockAdaptState.fresh(pdim, init_var)
                adapt_table[key] = st
            return st

        for j in range(self.state.J):
            n_acc, n_blocks = self.update_beta(j, adapt_for, rng, update_adapt)
            stats["beta"][0] += n_acc
            stats["beta"][1] += n_blocks
            acc = self.update_sigma(j, adapt_for, rng, update_adapt)
            stats["sigma"][0] += bool(acc)
            stats["sigma"][1] += 1
            acc = self.update_psi(j, adapt_for, rng, update_adapt)
            if acc is not None:
                stats["psi"][0] += bool(acc)
                stats["psi"][1] += 1
            acc = self.update_rho(j, adapt_for, rng, update_adapt)
            if acc is not None:
                stats["rho"][0] += bool(acc)
                stats["rho"][1] += 1
            acc = self.update_v(j, adapt_for, rng, update_adapt)
            stats["v"][0] += bool(acc)
            stats["v"][1] += 1
        row_adapt = adapt_table.get("rows")
        if row_adapt is None:
            row_adapt = RowAdaptState(self.n, len(self.free_dims) or 1)
            adapt_table["rows"] = row_adapt
        stats["rows"] = self.update_rows(row_adapt, rng, update_adapt)
        return stats


def gibbs_sweep(state, dataset, hyper, link_specs, adapt, rng, update_adapt=True):
    """One full sweep over component blocks then latent rows.

    adapt is a mutable mapping that persists proposal state across sweeps;
    pass the same object on every call.
    """
    ws = _Workspace(state, dataset, hyper, link_specs)
    ws.sweep(adapt, rng, update_adapt=update_adapt)
    return state, adapt


### initialization and the outer loop ------------------------------------------


def initial_latents(dataset, link_specs):
    """Interval midpoints; half-unit offsets from any one-sided bound."""
    n, d = dataset.Z.shape
    Y = np.zeros((n, d))
    for ell, spec in enumerate(link_specs):
        if spec.kind == lk.IDENTITY:
            Y[:, ell] = dataset.Z[:, ell]
            continue
        lo, hi, dead = lk.bounds_dim_arrays(
            link_specs, ell, dataset.Z, dataset.censored, dataset.X, Y
        )
        if dead.any():
            raise ValidationError(
                f"z_{ell + 1}: rows {np.nonzero(dead)[0][:5]} leave no latent value"
            )
        fin_l = np.isfinite(lo)
        fin_u = np.isfinite(hi)
        both = fin_l & fin_u
        Y[both, ell] = 0.5 * (lo[both] + hi[both])
        Y[fin_l & ~fin_u, ell] = lo[fin_l & ~fin_u] + 0.5
        Y[~fin_l & fin_u, ell] = hi[~fin_l & fin_u] - 0.5
        Y[~fin_l & ~fin_u, ell] = 0.0
    return Y


@dataclass
class McmcSettings:
    j0: int = 15
    burnin: int = 10000
    iters: int = 20000
    thin: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.iters % self.thin != 0:
            raise ValidationError("iters must be a multiple of thin")
        if self.j0 < 1 or self.burnin < 0 or self.iters < 1 or self.thin < 1:
            raise ValidationError("bad MCMC settings")


def run_mcmc(dataset, hyper, link_specs, settings, trace_path=None, progress=None):
    """Burn in, then retain every thin-th state as an equally weighted particle."""
    link_specs = lk.validate_link_specs(link_specs)
    plan = RngPlan(settings.seed)
    rng = plan.rng(RngPlan.MCMC)
    J0 = settings.j0
    v, mu, tau, rho, beta, sigma = sample_base_measure(hyper, rng, J0)
    state = MixtureState(v, mu, tau, rho, beta, sigma, initial_latents(dataset, link_specs))
    ws = _Workspace(state, dataset, hyper, link_specs)
    adapt = {}
    M = settings.iters // settings.thin
    pset = ParticleSet.allocate(
        M, J0, hyper.p, hyper.varrho.shape[0], dataset.X.shape[1], dataset.d,
        dataset.n, settings.seed,
    )
    trace_rows = []
    agg = {k: [0, 0] for k in ("beta", "sigma", "psi", "rho", "v")}
    row_acc = []
    total = settings.burnin + settings.iters
    t0 = time.perf_counter()
    for it in range(total):
        stats = ws.sweep(adapt, rng, update_adapt=True)
        for k in agg:
            agg[k][0] += stats[k][0]
            agg[k][1] += stats[k][1]
        row_acc.append(stats["rows"])
        kept = it >= settings.burnin and (it - settings.burnin + 1) % settings.thin == 0
        if kept:
            m = (it - settings.burnin + 1) // settings.thin - 1
            pset.set_state(m, state)
            rates = {
                k: (agg[k][0] / agg[k][1] if agg[k][1] else float("nan")) for k in agg
            }
            trace_rows.append(
                (it + 1, ws.loglik(), rates["beta"], rates["sigma"], rates["psi"],
                 rates["rho"], rates["v"], float(np.mean(row_acc)))
            )
            agg = {k: [0, 0] for k in agg}
            row_acc = []
        if progress and (it + 1) % progress == 0:
            print(
                f"sweep {it + 1}/{total} loglik={ws.loglik():.2f} "
                f"({time.perf_counter() - t0:.0f}s)", flush=True,
            )
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(
                ["iteration", "loglik", "acc_beta", "acc_sigma", "acc_psi", "acc_rho",
                 "acc_v", "acc_rows"]
            )
            for row in trace_rows:
                wr.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return pset
