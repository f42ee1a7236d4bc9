"""Mixture model state, prior densities, and the data-driven prior builder.

The response model inside component j is y | x ~ N_d(x beta_j, sigma_j).
Component weights depend on covariates through a product kernel: normal in
each continuous covariate, Bernoulli in each dummy column. Stick variables v
set the baseline weights; the covariate kernel tilts them per observation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln, multigammaln

from . import links as lk
from .data import ValidationError
from .util import LOG_2PI, chol_psd, logsumexp_vec, mvn_logpdf_chol


@dataclass
class Hyperparams:
    """Base-measure and stick hyperparameters.

    beta0, U: matrix-normal location and row covariance for the coefficient
        block; the column covariance is each component's sigma.
    sigma0, nu: inverse-Wishart scale and degrees of freedom.
    mu0, u, alpha, gamma: per continuous covariate, the normal-gamma numbers
        (location, precision multiplier, shape, rate).
    varrho: per dummy column, the Beta parameters of the kernel probability.
    zeta: Beta parameters shared by every stick variable.
    """

    beta0: np.ndarray
    U: np.ndarray
    sigma0: np.ndarray
    nu: float
    mu0: np.ndarray
    u: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    varrho: np.ndarray
    zeta: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        self.sigma0 = np.asarray(self.sigma0, dtype=float)
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.varrho = np.asarray(self.varrho, dtype=float).reshape(-1, 2)
        q1, d = self.beta0.shape
        if self.U.shape != (q1, q1) or self.sigma0.shape != (d, d):
            raise ValidationError("hyperparameter shape mismatch")
        if self.nu <= d + 1:
            raise ValidationError("nu must exceed d + 1")
        if np.any(self.u <= 0) or np.any(self.alpha <= 0) or np.any(self.gamma <= 0):
            raise ValidationError("normal-gamma hyperparameters must be positive")
        if np.any(self.varrho <= 0) or min(self.zeta) <= 0:
            raise ValidationError("Beta hyperparameters must be positive")
        # cache factorizations reused throughout sampling
        self._U_chol = chol_psd(self.U, jitter=1e-10)
        self._sigma0_chol = chol_psd(self.sigma0, jitter=1e-10)

    @property
    def p(self):
        return self.mu0.shape[0]

    @property
    def d(self):
        return self.sigma0.shape[0]

    @property
    def U_chol(self):
        return self._U_chol


@dataclass
class MixtureState:
    """One draw of the truncated mixture: sticks, kernels, components, latents.

    Shapes: v (J,), psi_mu/psi_tau (J, p), psi_rho (J, q-p), beta (J, q+1, d),
    sigma (J, d, d), y (n, d).
    """

    v: np.ndarray
    psi_mu: np.ndarray
    psi_tau: np.ndarray
    psi_rho: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    y: np.ndarray

    @property
    def J(self):
        return self.v.shape[0]

    def copy(self):
        return MixtureState(
            self.v.copy(), self.psi_mu.copy(), self.psi_tau.copy(), self.psi_rho.copy(),
            self.beta.copy(), self.sigma.copy(), self.y.copy(),
        )


### weights ------------------------------------------------------------------


def log_stick_weights(v):
    """log w_j for the stick-breaking construction, in log space throughout."""
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        logv = np.log(v)
        log1mv = np.log1p(-v)
    prefix = np.concatenate(([0.0], np.cumsum(log1mv[:-1])))
    return logv + prefix


def stick_to_weights(v):
    return np.exp(log_stick_weights(v))


def kernel_log_g(x_cont, x_bin, mu, tau, rho):
    """log of the covariate kernel at one design row (continuous, dummy parts)."""
    out = 0.0
    if mu.size:
        out += np.sum(0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (x_cont - mu) ** 2)
    if rho.size:
        with np.errstate(divide="ignore"):
            out += np.sum(np.where(x_bin > 0.5, np.log(rho), np.log1p(-rho)))
    return out


def kernel_g(x, psi_mu, psi_tau, psi_rho, p):
    """Density value of the covariate kernel; the log form is what samplers use."""
    x = np.asarray(x, dtype=float)
    return float(np.exp(kernel_log_g(x[1 : p + 1], x[p + 1 :], psi_mu, psi_tau, psi_rho)))


def kernel_log_g_matrix(X, p, psi_mu, psi_tau, psi_rho):
    """(n, J) matrix of log kernel values for stacked component parameters."""
    Xc = X[:, 1 : p + 1]
    Xb = X[:, p + 1 :]
    J = psi_mu.shape[0]
    out = np.zeros((X.shape[0], J))
    if psi_mu.shape[1]:
        # (n, J, p) broadcast collapsed over p
        diff = Xc[:, None, :] - psi_mu[None, :, :]
        out += np.sum(
            0.5 * (np.log(psi_tau) - LOG_2PI)[None, :, :] - 0.5 * psi_tau[None, :, :] * diff**2,
            axis=2,
        )
    if psi_rho.shape[1]:
        with np.errstate(divide="ignore"):
            lr = np.log(psi_rho)
            l1r = np.log1p(-psi_rho)
        out += Xb @ lr.T + (1.0 - Xb) @ l1r.T
    return out


def covariate_log_weights(state, x):
    """log of the normalized covariate-dependent weights at design row x."""
    x = np.asarray(x, dtype=float)
    p = state.psi_mu.shape[1]
    logw = log_stick_weights(state.v)
    logg = np.array([
        kernel_log_g(x[1 : p + 1], x[p + 1 :], state.psi_mu[j], state.psi_tau[j], state.psi_rho[j])
        for j in range(state.J)
    ])
    a = logw + logg
    return a - logsumexp_vec(a)


def covariate_weights(state, x):
    return np.exp(covariate_log_weights(state, x))


def latent_mixture_logdensity(state, x, y):
    """log sum_j w_j(x) N_d(y | x beta_j, sigma_j), weights normalized at x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    logw_x = covariate_log_weights(state, x)
    comp = np.empty(state.J)
    for j in range(state.J):
        chol = chol_psd(state.sigma[j])
        comp[j] = mvn_logpdf_chol(y - x @ state.beta[j], chol)
    return float(logsumexp_vec(logw_x + comp))


### prior densities ------------------------------------------------------------


def invwishart_logpdf(sigma, scale, nu):
    d = scale.shape[0]
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return -np.inf
    logdet_sigma = 2.0 * np.sum(np.log(np.diag(chol)))
    sign, logdet_scale = np.linalg.slogdet(scale)
    if sign <= 0:
        raise ValidationError("inverse-Wishart scale must be positive definite")
    inv_sigma = np.linalg.inv(sigma)
    tr = float(np.sum(scale * inv_sigma))
    return (
        0.5 * nu * logdet_scale
        - 0.5 * nu * d * np.log(2.0)
        - multigammaln(0.5 * nu, d)
        - 0.5 * (nu + d + 1.0) * logdet_sigma
        - 0.5 * tr
    )


def matrix_normal_logpdf(B, M, U_chol, sigma_chol):
    q1, d = B.shape
    resid = B - M
    # tr(sigma^-1 R^T U^-1 R) via triangular solves on both sides
    from scipy.linalg import solve_triangular

    a = solve_triangular(U_chol, resid, lower=True, check_finite=False)
    b = solve_triangular(sigma_chol, a.T, lower=True, check_finite=False)
    quad = float(np.sum(b * b))
    logdet_U = 2.0 * np.sum(np.log(np.diag(U_chol)))
    logdet_sigma = 2.0 * np.sum(np.log(np.diag(sigma_chol)))
    return -0.5 * (q1 * d * LOG_2PI + d * logdet_U + q1 * logdet_sigma + quad)


def normal_gamma_logpdf(mu, tau, mu0, u, alpha, gamma):
    """N(mu | mu0, (u tau)^-1) Gamma(tau | alpha, rate gamma), elementwise sum."""
    if np.any(tau <= 0):
        return -np.inf
    norm = 0.5 * (np.log(u * tau) - LOG_2PI) - 0.5 * u * tau * (mu - mu0) ** 2
    gam = alpha * np.log(gamma) - gammaln(alpha) + (alpha - 1.0) * np.log(tau) - gamma * tau
    return float(np.sum(norm + gam))


def beta_logpdf(x, a, b):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or np.any(x >= 1):
        return -np.inf
    return float(np.sum((a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)))


def log_prior(state, hyper):
    """Joint log prior of all truncation-level parameters; -inf off support."""
    out = 0.0
    z1, z2 = hyper.zeta
    lv = beta_logpdf(state.v, z1, z2)
    if not np.isfinite(lv):
        return -np.inf
    out += lv
    for j in range(state.J):
        try:
            sig_chol = np.linalg.cholesky(state.sigma[j])
        except np.linalg.LinAlgError:
            return -np.inf
        out += invwishart_logpdf(state.sigma[j], hyper.sigma0, hyper.nu)
        out += matrix_normal_logpdf(state.beta[j], hyper.beta0, hyper.U_chol, sig_chol)
        ng = normal_gamma_logpdf(
            state.psi_mu[j], state.psi_tau[j], hyper.mu0, hyper.u, hyper.alpha, hyper.gamma
        )
        if not np.isfinite(ng):
            return -np.inf
        out += ng
        if state.psi_rho.shape[1]:
            lr = 0.0
            for k in range(state.psi_rho.shape[1]):
                lr += beta_logpdf(state.psi_rho[j, k], hyper.varrho[k, 0], hyper.varrho[k, 1])
            if not np.isfinite(lr):
                return -np.inf
            out += lr
    return float(out)


### base measure sampling -------------------------------------------------------


def sample_invwishart(rng, scale, nu):
    """Bartlett draw: Sigma^-1 ~ Wishart(nu, scale^-1)."""
    d = scale.shape[0]
    chol_scale_inv = np.linalg.cholesky(np.linalg.inv(scale))
    A = np.zeros((d, d))
    for i in range(d):
        A[i, i] = np.sqrt(rng.chisquare(nu - i))
        for k in range(i):
            A[i, k] = rng.standard_normal()
    W_chol = chol_scale_inv @ A
    W = W_chol @ W_chol.T
    return np.linalg.inv(W)


def sample_component(hyper, rng):
    """One base-measure draw: (beta, sigma, mu, tau, rho)."""
    d = hyper.d
    q1 = hyper.beta0.shape[0]
    sigma = sample_invwishart(rng, hyper.sigma0, hyper.nu)
    sig_chol = np.linalg.cholesky(sigma)
    G = rng.standard_normal((q1, d))
    beta = hyper.beta0 + hyper.U_chol @ G @ sig_chol.T
    tau = rng.gamma(hyper.alpha, 1.0 / hyper.gamma)
    mu = hyper.mu0 + rng.standard_normal(hyper.p) / np.sqrt(hyper.u * tau)
    rho = np.array([rng.beta(a, b) for a, b in hyper.varrho])
    return beta, sigma, mu, tau, rho


def sample_base_measure(hyper, rng, J):
    """Stack J independent component draws plus stick variables."""
    q1, d = hyper.beta0.shape
    beta = np.empty((J, q1, d))
    sigma = np.empty((J, d, d))
    mu = np.empty((J, hyper.p))
    tau = np.empty((J, hyper.p))
    rho = np.empty((J, hyper.varrho.shape[0]))
    for j in range(J):
        beta[j], sigma[j], mu[j], tau[j], rho[j] = sample_component(hyper, rng)
    v = rng.beta(hyper.zeta[0], hyper.zeta[1], size=J)
    return v, mu, tau, rho, beta, sigma


### data-driven prior ----------------------------------------------------------


def _truncnorm_draw(rng, mean, sd, lower):
    """One draw of N(mean, sd^2) truncated to (lower, inf); plain normal if unbounded."""
    from scipy.special import ndtr, ndtri

    if not np.isfinite(lower):
        return mean + sd * rng.standard_normal()
    a = ndtr((lower - mean) / sd)
    a = min(a, 1.0 - 1e-12)
    u = a + (1.0 - a) * rng.random()
    return mean + sd * ndtri(u)


def auxiliary_latents(dataset, link_specs, rng, censored_recipe="auto"):
    """Rough latent coordinates used only to center the prior.

    Observed event dims take interval midpoints on the latent scale. Censored
    dims follow either the horizon rule log(x_1 + 2) or a truncated-normal
    draw with moments from the observed rows; "auto" picks the latter exactly
    when a sum-constrained dimension is present.
    """
    if censored_recipe == "auto":
        has_sum = any(s.kind == lk.SUM_CONSTRAINED for s in link_specs)
        censored_recipe = "trunc_normal" if has_sum else "log_age"
    if censored_recipe not in ("log_age", "trunc_normal"):
        raise ValidationError(f"unknown censored recipe {censored_recipe!r}")

    Z, C, X = dataset.Z, dataset.censored, dataset.X
    n, d = Z.shape
    Y = np.zeros((n, d))
    for ell, spec in enumerate(link_specs):
        if spec.kind == lk.IDENTITY:
            Y[:, ell] = Z[:, ell]
            continue
        if spec.kind == lk.SIGN:
            Y[:, ell] = np.where(Z[:, ell] > 0.5, 1.0, -1.0)
            continue
        lo, hi, _ = lk.bounds_dim_arrays(link_specs, ell, Z, C, X, Y)
        obs = ~C[:, ell]
        both = obs & np.isfinite(lo)
        Y[both, ell] = 0.5 * (lo[both] + hi[both])
        open_lo = obs & ~np.isfinite(lo)
        Y[open_lo, ell] = hi[open_lo] - 1.0
        cens = C[:, ell]
        if not cens.any():
            continue
        if censored_recipe == "log_age":
            Y[cens, ell] = np.log(X[cens, spec.censor_covariate_index] + 2.0)
        else:
            if not obs.any():
                raise ValidationError(f"z_{ell + 1}: every record censored, cannot set moments")
            mean = float(np.mean(Y[obs, ell]))
            sd = float(np.std(Y[obs, ell], ddof=1)) if obs.sum() > 1 else 1.0
            sd = max(sd, 1e-6)
            for i in np.nonzero(cens)[0]:
                Y[i, ell] = _truncnorm_draw(rng, mean, sd, lo[i])
    return Y


def build_empirical_prior(dataset, link_specs, g_factor, rng, censored_recipe="auto"):
    """Least-squares moments of auxiliary latents become the base measure.

    The coefficient prior is centered at the fit with row covariance
    g_factor (X'X)^-1 / min_l sigma_hat_ll; the inverse-Wishart is centered
    at the residual covariance with nu = d + 3.
    """
    X = dataset.X
    n, q1 = X.shape
    d = dataset.d
    Y = auxiliary_latents(dataset, link_specs, rng, censored_recipe)

    xtx = X.T @ X
    ridge = 1e-8 * np.trace(xtx) / q1
    xtx_r = xtx + ridge * np.eye(q1)
    try:
        xtx_inv = np.linalg.inv(xtx_r)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(
            "X'X is singular even after ridge jitter; drop collinear covariates"
        ) from exc
    beta_hat = xtx_inv @ (X.T @ Y)
    resid = Y - X @ beta_hat
    dof = max(n - q1, 1)
    sigma_hat = resid.T @ resid / dof
    # guard degenerate residuals on toy inputs
    floor = 1e-10 * max(np.trace(sigma_hat) / d, 1e-10)
    sigma_hat = sigma_hat + floor * np.eye(d)

    nu = float(d + 3)
    sigma0 = (nu - d - 1.0) * sigma_hat
    U = g_factor * xtx_inv / float(np.min(np.diag(sigma_hat)))

    p = dataset.schema.p
    mu0 = np.array([float(np.mean(X[:, 1 + k])) for k in range(p)])
    u = np.full(p, 0.5)
    alpha = np.full(p, 2.0)
    rng_widths = np.array([
        float(np.max(X[:, 1 + k]) - np.min(X[:, 1 + k])) for k in range(p)
    ])
    rng_widths = np.maximum(rng_widths, 1e-6)
    gamma = u * (rng_widths / 4.0) ** 2
    varrho = np.ones((dataset.schema.q - p, 2))
    return Hyperparams(
        beta0=beta_hat, U=U, sigma0=sigma0, nu=nu,
        mu0=mu0, u=u, alpha=alpha, gamma=gamma, varrho=varrho, zeta=(1.0, 1.0),
    )
