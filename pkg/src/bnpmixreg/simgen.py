"""Synthetic benchmark generator with closed-form mean and density oracles.

Two event ages are noisy, floor-discretized readings of nonlinear age curves
(the second is coupled to the first), plus one probit binary outcome. Ages
exceeding the subject's continuous age are recorded as censored. Note the
deliberate asymmetry: generation censors against the undiscretized age while
the fitting bounds use the integer age plus one, so a record can sit a
fraction past the threshold yet share its floor with an observable value.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .data import CovariateSchema, Dataset, ValidationError, expand_dummies
from .util import RngPlan

SCHEMA = CovariateSchema(p=1, categorical_levels=(3, 2))

_W1 = 0.9
_MEAN_A = -1.0 / 6.0
_MEAN_B = 1.5
_SD1_A = 0.5
_SD1_B = 0.75


@dataclass(frozen=True)
class SimConfig:
    n: int
    seed: int = 0
    censor: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("need at least one row")


def _mean_curve_first(age, cat2, cat3):
    age = np.asarray(age, dtype=float)
    cat2 = np.asarray(cat2)
    cat3 = np.asarray(cat3)
    out = np.where(
        cat3 == 2,
        np.where(
            cat2 == 1,
            1e-4 * age**3 - 0.0695 * age**2 + 3.83 * age - 30.584,
            -0.057 * age**2 + 3.08 * age - 21.247,
        ),
        np.where(cat2 == 1, (8.0 / 15.0) * age + 7.0, age / 3.0 + 10.0),
    )
    return out


def _mean_curve_second(age, cat3):
    age = np.asarray(age, dtype=float)
    return np.where(
        np.asarray(cat3) == 2,
        -0.056 * age**2 + 3.08 * age - 18.0,
        0.5 * age + 8.0,
    )


def _second_error_sds(age, cat3):
    age = np.asarray(age, dtype=float)
    narrow = np.where(np.asarray(cat3) == 2, 0.4, 7.5 / age)
    wide = np.where(np.asarray(cat3) == 2, 0.75, 7.5 / age)
    return narrow, wide


def true_mean(age, cat2, cat3, ell):
    """Generating-process mean of the undiscretized response at a covariate."""
    if ell == 0:
        return _mean_curve_first(age, cat2, cat3)
    if ell == 1:
        return _mean_curve_second(age, cat3)
    if ell == 2:
        return ndtr((np.asarray(age, dtype=float) - 18.0) / 6.0)
    raise ValidationError("ell must be 0, 1, or 2")


def _norm_pdf(z, mean, sd):
    return np.exp(-0.5 * ((z - mean) / sd) ** 2) / (sd * np.sqrt(2.0 * np.pi))


def true_density(z, age, cat2, cat3, ell):
    """Generating-process density (or success mass for the binary response)."""
    z = np.asarray(z, dtype=float)
    if ell == 0:
        m = _mean_curve_first(age, cat2, cat3)
        return _W1 * _norm_pdf(z, m + _MEAN_A, _SD1_A) + (1.0 - _W1) * _norm_pdf(
            z, m + _MEAN_B, _SD1_B
        )
    if ell == 1:
        b = _mean_curve_second(age, cat3)
        sd_n, sd_w = _second_error_sds(age, cat3)
        # 0.75 * first error plus an independent second error: four components
        parts = [
            (_W1 * _W1, 0.75 * _MEAN_A + _MEAN_A, 0.75 * _SD1_A, sd_n),
            (_W1 * (1 - _W1), 0.75 * _MEAN_A + _MEAN_B, 0.75 * _SD1_A, sd_w),
            ((1 - _W1) * _W1, 0.75 * _MEAN_B + _MEAN_A, 0.75 * _SD1_B, sd_n),
            ((1 - _W1) * (1 - _W1), 0.75 * _MEAN_B + _MEAN_B, 0.75 * _SD1_B, sd_w),
        ]
        out = np.zeros(np.broadcast(z, np.asarray(age, dtype=float)).shape)
        for w, m_off, s_a, s_b in parts:
            out = out + w * _norm_pdf(z, b + m_off, np.sqrt(s_a**2 + s_b**2))
        return out
    if ell == 2:
        p = true_mean(age, cat2, cat3, 2)
        return np.where(z == 1.0, p, np.where(z == 0.0, 1.0 - p, 0.0))
    raise ValidationError("ell must be 0, 1, or 2")


def _mixture_draw(rng, n, mean_a, sd_a, mean_b, sd_b):
    pick = rng.random(n) < _W1
    draw_a = mean_a + sd_a * rng.standard_normal(n)
    draw_b = mean_b + sd_b * rng.standard_normal(n)
    return np.where(pick, draw_a, draw_b), pick


def generate(cfg):
    """Draw a dataset plus a hidden-truth table for scoring against oracles.

    The truth table keeps the continuous age, the undiscretized uncensored
    responses, the error-mixture component picks, and the binary success
    probability, one row per observation.
    """
    rng = RngPlan(cfg.seed).rng(RngPlan.SIMGEN)
    n = cfg.n
    age = rng.uniform(15.0, 30.0, size=n)
    cat2 = rng.choice(np.array([1, 2, 3]), size=n, p=[0.5, 0.3, 0.2])
    cat3 = rng.choice(np.array([1, 2]), size=n, p=[0.4, 0.6])

    m1 = _mean_curve_first(age, cat2, cat3)
    eps1, pick1 = _mixture_draw(rng, n, _MEAN_A, _SD1_A, _MEAN_B, _SD1_B)
    zt1 = m1 + eps1

    b2 = _mean_curve_second(age, cat3)
    sd_n, sd_w = _second_error_sds(age, cat3)
    eps2, pick2 = _mixture_draw(rng, n, _MEAN_A, sd_n, _MEAN_B, sd_w)
    zt2 = b2 + 0.75 * (zt1 - m1) + eps2

    p3 = ndtr((age - 18.0) / 6.0)
    z3 = (rng.random(n) < p3).astype(float)

    X = np.empty((n, SCHEMA.q + 1))
    x1 = np.floor(age)
    for i in range(n):
        X[i] = expand_dummies(np.array([x1[i], cat2[i], cat3[i]]), SCHEMA).values

    Z = np.zeros((n, 3))
    censored = np.zeros((n, 3), dtype=bool)
    for ell, zt in ((0, zt1), (1, zt2)):
        over = (zt > age) & cfg.censor
        Z[:, ell] = np.where(over, 0.0, np.floor(zt))
        censored[:, ell] = over
    Z[:, 2] = z3

    dataset = Dataset(SCHEMA, X, Z, censored)
    truth = pd.DataFrame(
        {
            "age": age,
            "ztilde_1": zt1,
            "ztilde_2": zt2,
            "component_1": np.where(pick1, 0, 1),
            "component_2": np.where(pick2, 0, 1),
            "p_success": p3,
        }
    )
    return dataset, truth
