"""Fit metrics, predictive checks, and a batch-means chain diagnostic."""

import itertools
import warnings

import numpy as np
import pandas as pd
from scipy.special import ndtr

from . import links as lk
from .data import ValidationError, expand_dummies
from .predict import particle_median_matrix, within_weights_matrix
from .util import LOG_2PI, RngPlan


def _mean_matrix(pset, X, ell):
    return np.einsum("nq,mjq->mnj", np.asarray(X, dtype=float), pset.beta[:, :, :, ell])


def _sd_column(pset, ell):
    return np.sqrt(pset.sigma[:, :, ell, ell])[:, None, :]


def _summed_dim_mass(pset, X, Z, cens, link_specs, ell, mc_samples, rng):
    """MC predictive mass for a summed response, base integrated out per draw."""
    spec = link_specs[ell]
    base = spec.base_dim
    W = within_weights_matrix(pset, X)
    mu_b = _mean_matrix(pset, X, base)
    sd_b = _sd_column(pset, base)
    mu_c = _mean_matrix(pset, X, ell)
    rho = pset.sigma[:, :, ell, base] / pset.sigma[:, :, base, base]
    var_cond = pset.sigma[:, :, ell, ell] - rho * pset.sigma[:, :, ell, base]
    s_cond = np.sqrt(np.maximum(var_cond, 1e-300))
    horizon = X[:, spec.censor_covariate_index] + 1.0
    G = rng.standard_normal((pset.M, mc_samples))
    f = np.zeros((pset.M, Z.shape[0]))
    zcol = Z[:, None, None]
    hcol = horizon[:, None, None]
    chunk = 128
    for m in range(pset.M):
        acc = np.zeros((Z.shape[0], pset.J))
        for s0 in range(0, mc_samples, chunk):
            g = G[m, s0 : s0 + chunk][None, None, :]
            y1 = mu_b[m][:, :, None] + sd_b[m][:, :, None] * g
            z1 = np.exp(y1)  # (n, J, s)
            mc = mu_c[m][:, :, None] + rho[m][None, :, None] * (y1 - mu_b[m][:, :, None])
            sc = s_cond[m][None, :, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                up = zcol + 1.0 - z1
                mass_up = np.where(up > 0, ndtr((np.log(np.maximum(up, 1e-300)) - mc) / sc), 0.0)
                lo = zcol - z1
                mass_lo = np.where(lo > 0, ndtr((np.log(np.maximum(lo, 1e-300)) - mc) / sc), 0.0)
                gap = hcol - z1
                surv = np.where(gap > 0, 1.0 - ndtr((np.log(np.maximum(gap, 1e-300)) - mc) / sc), 1.0)
            mass = np.where(cens[:, None, None], surv, mass_up - mass_lo)
            acc += np.sum(mass, axis=2)
        f[m] = np.sum(W[m] * acc / mc_samples, axis=1)
    return f


def observation_likelihoods(pset, dataset, link_specs, ell, mc_samples=2000, rng=None):
    """(M, n) predictive mass of each recorded response under each particle."""
    link_specs = lk.validate_link_specs(link_specs)
    X = dataset.X
    Z = dataset.Z[:, ell]
    cens = dataset.censored[:, ell]
    kind = link_specs[ell].kind
    if kind == lk.SUM_CONSTRAINED:
        if rng is None:
            rng = RngPlan(pset.seed).rng(RngPlan.PREDICT, 1)
        return _summed_dim_mass(pset, X, Z, cens, link_specs, ell, mc_samples, rng)
    W = within_weights_matrix(pset, X)
    means = _mean_matrix(pset, X, ell)
    sds = _sd_column(pset, ell)
    if kind == lk.FLOOR_EXP:
        cci = link_specs[ell].censor_covariate_index
        hi = np.where(cens, np.inf, np.log(np.maximum(Z, 0.5) + 1.0))
        lo = np.where(cens, np.log(X[:, cci] + 1.0), np.log(np.maximum(Z, 0.5)))
        upper = np.where(
            np.isfinite(hi)[None, :, None], ndtr((np.where(np.isfinite(hi), hi, 0.0)[None, :, None] - means) / sds), 1.0
        )
        lower = ndtr((lo[None, :, None] - means) / sds)
        return np.sum(W * (upper - lower), axis=2)
    if kind == lk.SIGN:
        prob = np.sum(W * ndtr(means / sds), axis=2)
        return np.where(Z[None, :] == 1.0, prob, 1.0 - prob)
    dens = np.exp(-0.5 * ((Z[None, :, None] - means) / sds) ** 2) / (
        sds * np.sqrt(2.0 * np.pi)
    )
    return np.sum(W * dens, axis=2)


def lpml(pset, dataset, link_specs, ell, mc_samples=2000, rng=None):
    """Log pseudo marginal likelihood for one response dimension.

    Each conditional ordinate is the weighted harmonic mean of per-particle
    predictive masses; with equal weights this is the usual 1/M form.
    """
    f = observation_likelihoods(pset, dataset, link_specs, ell, mc_samples, rng)
    theta = pset.weights()
    zero = np.any(f <= 0.0, axis=0) | ~np.all(np.isfinite(f), axis=0)
    if zero.any():
        warnings.warn(
            f"{int(zero.sum())} observations have a vanishing predictive mass; "
            "their conditional ordinates are -inf"
        )
    with np.errstate(divide="ignore"):
        cpo = -np.log(np.sum(theta[:, None] / f, axis=0))
    cpo[zero] = -np.inf
    return float(np.sum(cpo))


def predictive_mean(pset, x_row, link_specs, ell):
    """Posterior predictive mean of the undiscretized response at one row."""
    from .predict import log_mixture_weights

    lm = np.exp(log_mixture_weights(pset, x_row))
    x = np.asarray(getattr(x_row, "values", x_row), dtype=float)
    means = np.einsum("q,mjq->mj", x, pset.beta[:, :, :, ell])
    kind = link_specs[ell].kind
    if kind == lk.SIGN:
        sd = np.sqrt(pset.sigma[:, :, ell, ell])
        return float(np.sum(lm * ndtr(means / sd)))
    if kind == lk.IDENTITY:
        return float(np.sum(lm * means))
    var = pset.sigma[:, :, ell, ell]
    return float(np.sum(lm * np.exp(means + 0.5 * var)))


def make_test_points(dataset, n_ages=31):
    """Factorial categorical grid crossed with equally spaced first-covariate values.

    Returns the expanded design matrix and a frame of raw covariate columns.
    """
    schema = dataset.schema
    if schema.p != 1:
        raise ValidationError("test grids are defined for one continuous covariate")
    x1 = dataset.X[:, 1]
    ages = np.linspace(float(np.min(x1)), float(np.max(x1)), int(n_ages))
    level_sets = [range(1, r + 1) for r in schema.categorical_levels]
    raw_rows = []
    design_rows = []
    for combo in itertools.product(*level_sets):
        for a in ages:
            raw = np.array([a, *combo], dtype=float)
            raw_rows.append(raw)
            design_rows.append(expand_dummies(raw, schema).values)
    frame = pd.DataFrame(
        raw_rows,
        columns=["x_1"] + [f"cat_{k+1}" for k in range(len(schema.categorical_levels))],
    )
    return np.asarray(design_rows), frame


def err_mean(pset, test_X, true_means, link_specs, ell):
    """Mean percentage absolute error of the predictive mean over test rows."""
    true_means = np.asarray(true_means, dtype=float)
    keep = true_means != 0.0
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} test points with zero true mean")
    if not keep.any():
        return float("nan")
    err = 0.0
    for i in np.nonzero(keep)[0]:
        est = predictive_mean(pset, test_X[i], link_specs, ell)
        err += abs(true_means[i] - est) / abs(true_means[i])
    return float(100.0 * err / keep.sum())


def err_dens(pset, test_X, true_dens, link_specs, ell, grid=None):
    """Accumulated absolute density error over test rows, Riemann-summed.

    Event responses compare densities on the grid with its spacing; binary
    responses compare the two point masses with unit spacing.
    """
    from .predict import marginal_density, prob_success_marginal

    test_X = np.asarray(test_X, dtype=float)
    true_dens = np.asarray(true_dens, dtype=float)
    n_star = test_X.shape[0]
    total = 0.0
    if link_specs[ell].kind == lk.SIGN:
        for i in range(n_star):
            p_hat = prob_success_marginal(pset, test_X[i], ell)
            total += abs(true_dens[i, 0] - (1.0 - p_hat)) + abs(true_dens[i, 1] - p_hat)
        return float(100.0 * total / n_star)
    if grid is None:
        raise ValidationError("event-response density error needs a grid")
    widths = np.diff(grid.points)
    widths = np.concatenate([widths, widths[-1:]])
    if grid.delta is not None:
        widths = np.full(grid.points.size, grid.delta)
    for i in range(n_star):
        f_hat = marginal_density(pset, test_X[i], ell, grid)
        total += float(np.sum(np.abs(true_dens[i] - f_hat) * widths))
    return float(100.0 * total / n_star)


def replicate(pset, X, link_specs, rng=None):
    """One replicated response set per particle at the given design rows.

    Returns (Z_rep, censored_rep) with shape (M, n, d). Draws are sequential
    over particles from a single stream, so results do not depend on thread
    count.
    """
    link_specs = lk.validate_link_specs(link_specs)
    X = np.asarray(X, dtype=float)
    if rng is None:
        rng = RngPlan(pset.seed).rng(RngPlan.REPLICATE)
    M, n, d = pset.M, X.shape[0], pset.d
    W = within_weights_matrix(pset, X)
    Z_rep = np.empty((M, n, d))
    cens_rep = np.zeros((M, n, d), dtype=bool)
    for m in range(M):
        cum = np.cumsum(W[m], axis=1)
        u = rng.random(n)
        comp = np.minimum((u[:, None] > cum).sum(axis=1), pset.J - 1)
        chols = np.linalg.cholesky(pset.sigma[m])
        means = np.einsum("nq,nqd->nd", X, pset.beta[m, comp])
        noise = rng.standard_normal((n, d))
        Y = means + np.einsum("nde,ne->nd", chols[comp], noise)
        Z_rep[m], cens_rep[m] = lk.apply_link_arrays(link_specs, Y, X)
    return Z_rep, cens_rep


def kaplan_meier(ages, censor_flags):
    """Product-limit survival estimate; censored records only hold the risk set.

    Returns (event_times, survival) evaluated just after each distinct event
    time.
    """
    ages = np.asarray(ages, dtype=float)
    censor_flags = np.asarray(censor_flags, dtype=bool)
    if ages.size == 0:
        raise ValidationError("no observations to estimate a survival curve from")
    if np.any(ages < 0):
        raise ValidationError("ages must be nonnegative")
    event_times = np.unique(ages[~censor_flags])
    surv = []
    s = 1.0
    for t in event_times:
        at_risk = int(np.sum(ages >= t))
        deaths = int(np.sum((ages == t) & ~censor_flags))
        s *= 1.0 - deaths / at_risk
        surv.append(s)
    return event_times, np.asarray(surv)


def _censor_prob_matrix(pset, X, link_specs, ell):
    W = within_weights_matrix(pset, X)
    means = _mean_matrix(pset, X, ell)
    sds = _sd_column(pset, ell)
    h = np.log(X[:, link_specs[ell].censor_covariate_index] + 1.0)
    return np.sum(W * (1.0 - ndtr((h[None, :, None] - means) / sds)), axis=2)


def posterior_predictive_pvalue(pset, dataset, link_specs, kind, ell=0, rng=None):
    """Weighted share of particles whose replicated discrepancy reaches the observed one.

    kind selects the discrepancy: "cens" compares censoring indicators with
    their predictive probabilities, "noncens" compares uncensored responses
    with per-particle predictive medians, "binary" compares a thresholded
    response with its success probability. Ties count toward the replicate.
    """
    link_specs = lk.validate_link_specs(link_specs)
    X = dataset.X
    spec = link_specs[ell]
    if kind in ("cens", "noncens") and spec.kind not in (lk.FLOOR_EXP, lk.SUM_CONSTRAINED):
        raise ValidationError(f"discrepancy {kind!r} needs an event response")
    if kind == "binary" and spec.kind != lk.SIGN:
        raise ValidationError("discrepancy 'binary' needs a thresholded response")
    Z_rep, cens_rep = replicate(pset, X, link_specs, rng)
    theta = pset.weights()
    if kind == "cens":
        P = _censor_prob_matrix(pset, X, link_specs, ell)
        obs = dataset.censored[:, ell].astype(float)[None, :]
        T_obs = np.mean(np.abs(obs - P), axis=1)
        T_rep = np.mean(np.abs(cens_rep[:, :, ell].astype(float) - P), axis=1)
    elif kind == "binary":
        W = within_weights_matrix(pset, X)
        means = _mean_matrix(pset, X, ell)
        sds = _sd_column(pset, ell)
        P = np.sum(W * ndtr(means / sds), axis=2)
        T_obs = np.mean(np.abs(dataset.Z[None, :, ell] - P), axis=1)
        T_rep = np.mean(np.abs(Z_rep[:, :, ell] - P), axis=1)
    elif kind == "noncens":
        med = particle_median_matrix(pset, X, ell)
        keep_obs = ~dataset.censored[:, ell]
        if not keep_obs.any():
            warnings.warn("every observation is censored; discrepancy undefined")
            return float("nan")
        T_obs = np.mean(np.abs(dataset.Z[None, keep_obs, ell] - med[:, keep_obs]), axis=1)
        keep_rep = ~cens_rep[:, :, ell]
        dev = np.abs(Z_rep[:, :, ell] - med)
        counts = keep_rep.sum(axis=1)
        if np.any(counts == 0):
            warnings.warn("some replicate sets are fully censored; counted as smaller")
        with np.errstate(invalid="ignore"):
            T_rep = np.where(
                counts > 0, np.sum(dev * keep_rep, axis=1) / np.maximum(counts, 1), np.nan
            )
    else:
        raise ValidationError(f"unknown discrepancy {kind!r}")
    with np.errstate(invalid="ignore"):
        hits = T_rep >= T_obs
    return float(np.sum(theta * hits))


def batch_means_ess(trace):
    """Effective sample size of a scalar chain from nonoverlapping batch means."""
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise ValidationError("need at least 100 iterations for batch means")
    b = int(np.floor(np.sqrt(n)))
    k = n // b
    x = x[: k * b]
    var_s = float(np.var(x, ddof=1))
    if var_s == 0.0:
        return 0.0
    bm = x.reshape(k, b).mean(axis=1)
    var_bm = float(np.var(bm, ddof=1))
    if var_bm == 0.0:
        return float(n)
    return float(min(n, n * var_s / (b * var_bm)))
