"""Deterministic artifact serialization: particle dumps, configs, tables.

The particle dump is a fixed-layout binary file (magic, canonical JSON
header, little-endian float64 blocks in a fixed order) so identical runs
produce identical bytes; archive formats with embedded timestamps would not.
"""

import hashlib
import json

import numpy as np
import tomli

from .data import ValidationError
from .particles import ParticleSet

MAGIC = b"BNPMIX01"

_BLOCKS = ("v", "psi_mu", "psi_tau", "psi_rho", "beta", "sigma", "y", "log_weights")


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_particles(pset, path, meta=None):
    """Write a particle dump; meta entries land in the header verbatim."""
    header = {
        "seed": int(pset.seed),
        "rejuv_round": int(pset.rejuv_round),
        "shapes": {name: list(getattr(pset, name).shape) for name in _BLOCKS},
    }
    if meta:
        header["meta"] = meta
    blob = _canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint64(len(blob)).tobytes())
        fh.write(blob)
        for name in _BLOCKS:
            arr = np.ascontiguousarray(getattr(pset, name), dtype="<f8")
            fh.write(arr.tobytes())


def load_particles(path):
    """Read a particle dump back into a ParticleSet; returns (pset, meta)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValidationError(f"{path} is not a particle dump")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode())
        arrays = {}
        for name in _BLOCKS:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValidationError(f"{path} is truncated at block {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValidationError(f"{path} has trailing bytes")
    pset = ParticleSet(
        v=arrays["v"],
        psi_mu=arrays["psi_mu"],
        psi_tau=arrays["psi_tau"],
        psi_rho=arrays["psi_rho"],
        beta=arrays["beta"],
        sigma=arrays["sigma"],
        y=arrays["y"],
        log_weights=arrays["log_weights"],
        seed=int(header["seed"]),
        rejuv_round=int(header.get("rejuv_round", 0)),
    )
    return pset, header.get("meta", {})


def load_config(path):
    """Parse a TOML or JSON run configuration."""
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".json"):
        return json.loads(text.decode())
    try:
        return tomli.loads(text.decode())
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"could not parse {path}: {exc}") from exc


_DEFAULTS = {
    "seed": 0,
    "threads": 0,
    "data": {"path": "", "p": 1, "categorical_levels": [], "n": 700, "censor": True},
    "links": {"set": "simulation", "d": 0},
    "prior": {"g_factor": 10.0, "censored_recipe": "auto"},
    "mcmc": {"j0": 15, "burnin": 10_000, "iters": 20_000, "thin": 10},
    "smc": {
        "stop_rule": "ess",
        "delta_frac": 0.01,
        "consecutive": 4,
        "m_star": 3,
        "resample_frac": 0.5,
        "max_extra": 100,
    },
    "predict": {"mc_samples": 10_000, "grid_points": 512},
}


def resolve_config(cfg):
    """Overlay a partial config onto the defaults; unknown keys are errors."""
    out = {}
    for key, default in _DEFAULTS.items():
        if isinstance(default, dict):
            section = dict(default)
            extra = cfg.get(key, {})
            if not isinstance(extra, dict):
                raise ValidationError(f"config section {key!r} must be a table")
            for k, v in extra.items():
                if k not in section:
                    raise ValidationError(f"unknown config key {key}.{k}")
                section[k] = v
            out[key] = section
        else:
            out[key] = cfg.get(key, default)
    for key in cfg:
        if key not in _DEFAULTS:
            raise ValidationError(f"unknown config section {key!r}")
    return out


def config_hash(cfg):
    """Stable fingerprint of a resolved config."""
    return hashlib.sha256(_canonical_json(cfg).encode()).hexdigest()[:16]


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows):
    """Plain CSV with full-precision floats (repr round-trips exactly)."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if isinstance(v, (float, np.floating)):
                    cells.append(repr(float(v)))
                else:
                    cells.append(str(v))
            fh.write(",".join(cells) + "\n")
