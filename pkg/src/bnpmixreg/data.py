"""Dataset containers, dummy coding, and CSV ingest/emit."""

import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import links as lk


class ValidationError(ValueError):
    """Malformed input data or configuration."""


@dataclass(frozen=True)
class CovariateSchema:
    """p continuous covariates followed by categoricals with the given level counts.

    Categorical level r of R is coded as R-1 dummies against level 1, so the
    design row has q + 1 entries with q = p + sum(R_k - 1) and a leading 1.
    """

    p: int
    categorical_levels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "categorical_levels", tuple(int(r) for r in self.categorical_levels))
        if self.p < 0:
            raise ValidationError("p must be nonnegative")
        if any(r < 2 for r in self.categorical_levels):
            raise ValidationError("categorical levels must be >= 2")
        if self.p == 0 and not self.categorical_levels:
            raise ValidationError("schema needs at least one covariate")

    @property
    def q(self):
        return self.p + sum(r - 1 for r in self.categorical_levels)

    @property
    def n_raw(self):
        return self.p + len(self.categorical_levels)


@dataclass(frozen=True)
class CovariateRow:
    """One design row: leading 1, continuous values, then dummy blocks."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or vals[0] != 1.0:
            raise ValidationError("design row must be 1-d with a leading 1")


@dataclass(frozen=True)
class ResponseRecord:
    z: np.ndarray
    censor_flags: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        c = np.asarray(self.censor_flags, dtype=bool)
        z.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "censor_flags", c)
        if z.shape != c.shape:
            raise ValidationError("response and censor flags must share a shape")


def expand_dummies(raw_row, schema):
    """Raw covariates (continuous values, then 1-based levels) to a design row."""
    raw = np.asarray(raw_row, dtype=float)
    if raw.shape != (schema.n_raw,):
        raise ValidationError(f"expected {schema.n_raw} raw covariates, got {raw.shape}")
    out = [1.0]
    out.extend(raw[: schema.p])
    for k, levels in enumerate(schema.categorical_levels):
        val = raw[schema.p + k]
        if val != int(val) or not 1 <= val <= levels:
            raise ValidationError(f"categorical {k + 1} must be an integer in 1..{levels}")
        block = np.zeros(levels - 1)
        if val > 1:
            block[int(val) - 2] = 1.0
        out.extend(block)
    return CovariateRow(np.array(out))


def collapse_dummies(design_row, schema):
    """Inverse of expand_dummies; validates the dummy blocks are one-hot."""
    vals = np.asarray(design_row, dtype=float)
    raw = list(vals[1 : schema.p + 1])
    pos = schema.p + 1
    for levels in schema.categorical_levels:
        block = vals[pos : pos + levels - 1]
        pos += levels - 1
        hot = np.nonzero(block == 1.0)[0]
        if not np.all(np.isin(block, (0.0, 1.0))) or len(hot) > 1:
            raise ValidationError("dummy block is not a level indicator")
        raw.append(1.0 if len(hot) == 0 else float(hot[0] + 2))
    return np.array(raw)


class Dataset:
    """Immutable design matrix plus responses with censor flags.

    X has shape (n, q+1) with a leading column of ones; Z and censored have
    shape (n, d) with d set by the link list used at load time.
    """

    def __init__(self, schema, X, Z, censored):
        self.schema = schema
        self.X = np.ascontiguousarray(np.asarray(X, dtype=float))
        self.Z = np.ascontiguousarray(np.asarray(Z, dtype=float))
        self.censored = np.ascontiguousarray(np.asarray(censored, dtype=bool))
        if self.X.ndim != 2 or self.X.shape[1] != schema.q + 1:
            raise ValidationError("design matrix width does not match the schema")
        if not np.all(self.X[:, 0] == 1.0):
            raise ValidationError("design matrix must carry a leading column of ones")
        if self.Z.shape != self.censored.shape or self.Z.shape[0] != self.X.shape[0]:
            raise ValidationError("response block shape mismatch")
        for arr in (self.X, self.Z, self.censored):
            arr.setflags(write=False)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.Z.shape[1]

    def covariate_row(self, i):
        return CovariateRow(self.X[i].copy())

    def response_record(self, i):
        return ResponseRecord(self.Z[i].copy(), self.censored[i].copy())

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.schema == other.schema
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.Z, other.Z)
            and np.array_equal(self.censored, other.censored)
        )


def _expected_columns(schema, link_specs):
    cols = [f"x_{i + 1}" for i in range(schema.p)]
    cols += [f"cat_{i + 1}" for i in range(len(schema.categorical_levels))]
    cols += [f"z_{i + 1}" for i in range(len(link_specs))]
    return cols


def _censor_columns(link_specs):
    return {
        f"c_{ell + 1}": ell
        for ell, spec in enumerate(link_specs)
        if spec.kind in (lk.FLOOR_EXP, lk.SUM_CONSTRAINED)
    }


def validate_responses(link_specs, Z, censored):
    """Link-level response checks shared by the loader and the simulator."""
    for ell, spec in enumerate(link_specs):
        z = Z[:, ell]
        if spec.kind == lk.IDENTITY:
            if censored[:, ell].any():
                raise ValidationError(f"z_{ell + 1}: identity responses cannot censor")
            continue
        if spec.kind == lk.SIGN:
            if not np.all(np.isin(z, (0.0, 1.0))):
                raise ValidationError(f"z_{ell + 1}: binary response must lie in {{0, 1}}")
            continue
        if np.any(z < 0) or np.any(z != np.floor(z)):
            raise ValidationError(f"z_{ell + 1}: event ages must be nonnegative integers")
        if np.any((z == 0) != censored[:, ell]):
            raise ValidationError(f"z_{ell + 1}: censor flags disagree with the z == 0 encoding")
        if spec.kind == lk.SUM_CONSTRAINED:
            zb = Z[:, spec.base_dim]
            obs = ~censored[:, ell]
            if np.any(obs & censored[:, spec.base_dim]):
                raise ValidationError(
                    f"z_{ell + 1}: observed while its base event z_{spec.base_dim + 1} is censored"
                )
            if np.any(obs & (z < zb)):
                raise ValidationError(f"z_{ell + 1}: observed before its base event")


def load_dataset(path, schema, link_specs):
    """Read a CSV with columns x_*, cat_*, z_* (and optional c_* flags).

    Censor flags on event dimensions follow the z == 0 encoding; explicit
    c_* columns (1 = event observed) must agree with it.
    """
    link_specs = lk.validate_link_specs(link_specs)
    if not os.path.exists(path):
        raise ValidationError(f"no such data file: {path}")
    try:
        frame = pd.read_csv(path, comment="#")
    except Exception as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from exc
    expected = _expected_columns(schema, link_specs)
    cens_cols = _censor_columns(link_specs)
    got = list(frame.columns)
    allowed = set(expected) | set(cens_cols)
    missing = [c for c in expected if c not in got]
    extra = [c for c in got if c not in allowed]
    if missing or extra:
        raise ValidationError(f"bad header: missing {missing}, unexpected {extra}")
    if len(frame) == 0:
        raise ValidationError("empty dataset")
    vals = frame[expected].to_numpy(dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValidationError("non-finite entries in data")

    d = len(link_specs)
    raw_cov = vals[:, : schema.n_raw]
    Z = vals[:, schema.n_raw :]
    X = np.stack([expand_dummies(row, schema).values for row in raw_cov])
    censored = lk.derive_censor_flags(link_specs, Z)
    for name, ell in cens_cols.items():
        if name in frame.columns:
            c = frame[name].to_numpy(dtype=float)
            if not np.all(np.isin(c, (0.0, 1.0))):
                raise ValidationError(f"{name}: censor flags must be 0/1")
            if np.any((c == 0.0) != censored[:, ell]):
                raise ValidationError(f"{name}: explicit censor flags disagree with z_{ell + 1}")
    validate_responses(link_specs, Z, censored)
    return Dataset(schema, X, Z, censored)


def save_dataset(dataset, link_specs, path):
    """Write the CSV the loader accepts; event dims include their c_* flags."""
    schema = dataset.schema
    raw = np.stack([collapse_dummies(row, schema) for row in dataset.X])
    cols = {}
    for i in range(schema.p):
        cols[f"x_{i + 1}"] = raw[:, i]
    for i in range(len(schema.categorical_levels)):
        cols[f"cat_{i + 1}"] = raw[:, schema.p + i].astype(int)
    for ell, spec in enumerate(link_specs):
        z = dataset.Z[:, ell]
        cols[f"z_{ell + 1}"] = z if spec.kind == lk.IDENTITY else z.astype(int)
    for name, ell in _censor_columns(link_specs).items():
        cols[name] = (~dataset.censored[:, ell]).astype(int)
    frame = pd.DataFrame(cols)
    frame.to_csv(path, index=False)
    return path
