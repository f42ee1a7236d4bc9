"""Observation links between latent Gaussian coordinates and recorded values.

Each response dimension carries a link mapping its latent coordinate (and,
for the sum-constrained kind, the latent coordinate of an earlier dimension)
to the recorded value. Inverting a link at a record yields an open interval
of latent values; intervals are always derived in dimension order because a
bound may read latent coordinates of strictly earlier dimensions only.
"""

from dataclasses import dataclass

import numpy as np

IDENTITY = "identity"
FLOOR_EXP = "floor_exp_censored"
SUM_CONSTRAINED = "sum_constrained_floor_exp"
SIGN = "sign_threshold"

_KINDS = (IDENTITY, FLOOR_EXP, SUM_CONSTRAINED, SIGN)


class DegenerateBoundsError(ValueError):
    """No latent value is consistent with the record / prefix combination."""


@dataclass(frozen=True)
class LinkSpec:
    """One response dimension's observation mechanism.

    kind: one of the module-level kind constants.
    base_dim: for the sum-constrained kind, the (0-based) earlier dimension
        whose latent coordinate enters the sum.
    censor_covariate_index: position within the design row of the covariate
        that right-censors the event (the design row starts with the
        intercept, so index 1 is the first recorded covariate).
    """

    kind: str
    base_dim: int | None = None
    censor_covariate_index: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown link kind {self.kind!r}")
        if self.kind == SUM_CONSTRAINED and self.base_dim is None:
            raise ValueError("sum_constrained_floor_exp requires base_dim")
        if self.kind != SUM_CONSTRAINED and self.base_dim is not None:
            raise ValueError("base_dim only applies to sum_constrained_floor_exp")


@dataclass
class LatentBounds:
    """Open intervals, one per dimension; -inf / +inf mark unbounded sides.

    Dimensions under the identity link are pinned: l == u == observed value.
    """

    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.l = np.atleast_1d(np.asarray(self.l, dtype=float))
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        if self.l.shape != self.u.shape:
            raise ValueError("bound arrays must share a shape")


def link_set(name, d=None):
    """Named link configurations.

    "simulation": two floor-exp event ages and one binary indicator.
    "colombia": two floor-exp event ages, one event age constrained to sum
    with the first, and one binary indicator.
    """
    if name == "simulation":
        return (
            LinkSpec(FLOOR_EXP),
            LinkSpec(FLOOR_EXP),
            LinkSpec(SIGN),
        )
    if name == "colombia":
        return (
            LinkSpec(FLOOR_EXP),
            LinkSpec(FLOOR_EXP),
            LinkSpec(SUM_CONSTRAINED, base_dim=0),
            LinkSpec(SIGN),
        )
    if name == "identity":
        if d is None:
            raise ValueError("identity link set needs d")
        return tuple(LinkSpec(IDENTITY) for _ in range(int(d)))
    raise ValueError(f"unknown link set {name!r}")


def validate_link_specs(link_specs):
    for ell, spec in enumerate(link_specs):
        if spec.kind == SUM_CONSTRAINED:
            if not 0 <= spec.base_dim < ell:
                raise ValueError("sum-constrained base_dim must point at an earlier dimension")
            base = link_specs[spec.base_dim]
            if base.kind != FLOOR_EXP:
                raise ValueError("sum-constrained base dimension must carry a floor-exp link")
    return tuple(link_specs)


def _record_values(z):
    if hasattr(z, "z"):
        return np.asarray(z.z, dtype=float), np.asarray(z.censor_flags, dtype=bool)
    return np.asarray(z, dtype=float), None


def _design_values(x):
    if hasattr(x, "values"):
        return np.asarray(x.values, dtype=float)
    return np.asarray(x, dtype=float)


def derive_censor_flags(link_specs, z):
    """Censoring encoded as z == 0 on event dimensions; others never censor."""
    z = np.asarray(z, dtype=float)
    flags = np.zeros(z.shape, dtype=bool)
    for ell, spec in enumerate(link_specs):
        if spec.kind in (FLOOR_EXP, SUM_CONSTRAINED):
            flags[..., ell] = z[..., ell] == 0.0
    return flags


def apply_link(link_specs, y, x):
    """Map a latent row to (recorded values, censor flags)."""
    y = np.asarray(y, dtype=float)
    x = _design_values(x)
    d = len(link_specs)
    z = np.empty(d)
    cens = np.zeros(d, dtype=bool)
    for ell, spec in enumerate(link_specs):
        if spec.kind == IDENTITY:
            z[ell] = y[ell]
        elif spec.kind == SIGN:
            z[ell] = 1.0 if y[ell] >= 0.0 else 0.0
        else:
            horizon = x[spec.censor_covariate_index] + 1.0
            if spec.kind == FLOOR_EXP:
                val = np.exp(y[ell])
            else:
                val = np.exp(y[spec.base_dim]) + np.exp(y[ell])
            if 0.0 < val < horizon:
                z[ell] = np.floor(val)
            else:
                z[ell] = 0.0
                cens[ell] = True
    return z, cens


def _interval(spec, ell, zval, censored, x, y_prefix):
    """Open interval for one dimension. Returns (l, u); raises on empty."""
    if spec.kind == IDENTITY:
        return zval, zval
    if spec.kind == SIGN:
        return (0.0, np.inf) if zval >= 0.5 else (-np.inf, 0.0)
    horizon = x[spec.censor_covariate_index] + 1.0
    if spec.kind == FLOOR_EXP:
        if censored:
            return np.log(horizon), np.inf
        lo = np.log(zval)  # zval >= 1 for an observed event
        hi = np.log(zval + 1.0)
        return lo, hi
    # sum-constrained: subtract the base dimension's latent contribution
    base = np.exp(y_prefix[spec.base_dim])
    if censored:
        rem = horizon - base
        lo = np.log(rem) if rem > 0.0 else -np.inf
        return lo, np.inf
    hi_arg = zval - base + 1.0
    if hi_arg <= 0.0:
        raise DegenerateBoundsError(
            f"dimension {ell}: observed value {zval} excludes every latent value "
            f"given exp(y_base) = {base:.6g}"
        )
    lo_arg = zval - base
    lo = np.log(lo_arg) if lo_arg > 0.0 else -np.inf
    return lo, np.log(hi_arg)


def bounds_for(link_specs, z, x, y_prefix, dim, censored=None):
    """Latent interval for one dimension given the record and earlier y's.

    z may be a plain length-d vector or a record object with censor flags;
    without flags, event dimensions fall back to the z == 0 encoding.
    """
    zvec, flags = _record_values(z)
    if censored is None:
        censored = flags if flags is not None else derive_censor_flags(link_specs, zvec)
    x = _design_values(x)
    y_prefix = np.asarray(y_prefix, dtype=float) if y_prefix is not None else np.empty(0)
    spec = link_specs[dim]
    if spec.kind == SUM_CONSTRAINED and y_prefix.size <= spec.base_dim:
        raise ValueError("y_prefix too short for the sum-constrained base dimension")
    lo, hi = _interval(spec, dim, float(zvec[dim]), bool(censored[dim]), x, y_prefix)
    return LatentBounds(np.array([lo]), np.array([hi]))


def bounds_all(link_specs, z, x, y, censored=None):
    """Per-dimension intervals, derived in dimension order from y prefixes."""
    zvec, flags = _record_values(z)
    if censored is None:
        censored = flags if flags is not None else derive_censor_flags(link_specs, zvec)
    x = _design_values(x)
    y = np.asarray(y, dtype=float)
    d = len(link_specs)
    lo = np.empty(d)
    hi = np.empty(d)
    for ell, spec in enumerate(link_specs):
        lo[ell], hi[ell] = _interval(spec, ell, float(zvec[ell]), bool(censored[ell]), x, y)
    return LatentBounds(lo, hi)


def log_in_bounds(y, bounds):
    """0.0 when every coordinate sits inside its open interval, else -inf.

    Pinned dimensions (l == u) require exact equality.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    l, u = bounds.l, bounds.u
    pinned = l == u
    ok_pinned = np.all(y[pinned] == l[pinned]) if pinned.any() else True
    free = ~pinned
    ok_free = np.all((y[free] > l[free]) & (y[free] < u[free])) if free.any() else True
    return 0.0 if (ok_pinned and ok_free) else -np.inf


### array paths used by the samplers ----------------------------------------


def bounds_dim_arrays(link_specs, ell, Z, censored, X, Y_partial):
    """Vectorized interval for dimension ell across all rows.

    Returns (l, u, dead) where dead marks rows whose interval is empty for
    the supplied prefix; callers treat dead rows as rejected proposals.
    """
    spec = link_specs[ell]
    n = Z.shape[0]
    dead = np.zeros(n, dtype=bool)
    if spec.kind == IDENTITY:
        pin = Z[:, ell].astype(float)
        return pin.copy(), pin.copy(), dead
    if spec.kind == SIGN:
        pos = Z[:, ell] >= 0.5
        lo = np.where(pos, 0.0, -np.inf)
        hi = np.where(pos, np.inf, 0.0)
        return lo, hi, dead
    horizon = X[:, spec.censor_covariate_index] + 1.0
    cens = censored[:, ell]
    with np.errstate(divide="ignore", invalid="ignore"):
        if spec.kind == FLOOR_EXP:
            lo = np.where(cens, np.log(horizon), np.log(np.maximum(Z[:, ell], 1e-300)))
            hi = np.where(cens, np.inf, np.log(Z[:, ell] + 1.0))
            return lo, hi, dead
        base = np.exp(Y_partial[:, spec.base_dim])
        rem_c = horizon - base
        lo_c = np.where(rem_c > 0.0, np.log(np.maximum(rem_c, 1e-300)), -np.inf)
        hi_arg = Z[:, ell] - base + 1.0
        lo_arg = Z[:, ell] - base
        lo_o = np.where(lo_arg > 0.0, np.log(np.maximum(lo_arg, 1e-300)), -np.inf)
        hi_o = np.log(np.maximum(hi_arg, 1e-300))
    dead = (~cens) & (hi_arg <= 0.0)
    dead |= ~np.isfinite(base)
    lo = np.where(cens, lo_c, lo_o)
    hi = np.where(cens, np.inf, hi_o)
    return lo, hi, dead


def apply_link_arrays(link_specs, Y, X):
    """Row-wise apply_link. Returns (Z, censor_flags) arrays."""
    Y = np.asarray(Y, dtype=float)
    n, d = Y.shape
    Z = np.empty((n, d))
    cens = np.zeros((n, d), dtype=bool)
    for ell, spec in enumerate(link_specs):
        if spec.kind == IDENTITY:
            Z[:, ell] = Y[:, ell]
        elif spec.kind == SIGN:
            Z[:, ell] = (Y[:, ell] >= 0.0).astype(float)
        else:
            horizon = X[:, spec.censor_covariate_index] + 1.0
            if spec.kind == FLOOR_EXP:
                val = np.exp(Y[:, ell])
            else:
                val = np.exp(Y[:, spec.base_dim]) + np.exp(Y[:, ell])
            inside = (val > 0.0) & (val < horizon)
            Z[:, ell] = np.where(inside, np.floor(val), 0.0)
            cens[:, ell] = ~inside
    return Z, cens
