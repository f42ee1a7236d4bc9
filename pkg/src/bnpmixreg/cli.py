"""Pipeline driver: simulate, fit, predict, check, score, describe."""

import functools
import os
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import links as lk
from . import metrics as mt
from . import simgen
from .data import CovariateSchema, ValidationError, expand_dummies, load_dataset, save_dataset
from .io import (
    config_hash,
    load_config,
    load_particles,
    resolve_config,
    save_particles,
    write_csv,
    write_json,
)
from .mcmc import McmcSettings, run_mcmc
from .model import build_empirical_prior
from .predict import (
    PredictGrid,
    censoring_probability,
    child_marginal_density,
    child_not_yet_probability,
    default_grid,
    marginal_density,
    marginal_median,
    prob_success_marginal,
)
from .smc import NumericFailure, StopRule, adaptive_truncation_run
from .util import RngPlan


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, FileNotFoundError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except NumericFailure as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _load_cfg(config_path, seed=None):
    raw = load_config(config_path) if config_path else {}
    cfg = resolve_config(raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg, config_hash(cfg)


def _schema(cfg):
    levels = tuple(int(r) for r in cfg["data"]["categorical_levels"])
    if not levels and cfg["links"]["set"] == "simulation":
        levels = (3, 2)
    return CovariateSchema(int(cfg["data"]["p"]), levels)


def _links(cfg):
    name = cfg["links"]["set"]
    d = int(cfg["links"]["d"]) or None
    return lk.link_set(name, d=d)


def _data_path(cfg, out_dir):
    return cfg["data"]["path"] or str(Path(out_dir) / "data.csv")


def _threads(cfg, flag):
    t = int(flag) if flag is not None else int(cfg["threads"])
    return os.cpu_count() or 1 if t <= 0 else t


def _prepend_comment(path, seed, chash):
    body = open(path, "rb").read()
    with open(path, "wb") as fh:
        fh.write(f"# seed={seed} config={chash}\n".encode())
        fh.write(body)


_config_opt = click.option("--config", "config_path", type=click.Path(), default=None)
_seed_opt = click.option("--seed", type=int, default=None)
_out_opt = click.option("--out-dir", type=click.Path(), default=".")


@click.group()
def main():
    """Covariate-dependent mixture modeling for censored, discretized responses."""


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@_guarded
def simulate(config_path, seed, out_dir):
    """Draw the synthetic benchmark and write data plus a truth sidecar."""
    cfg, chash = _load_cfg(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = simgen.SimConfig(
        n=int(cfg["data"]["n"]), seed=cfg["seed"], censor=bool(cfg["data"]["censor"])
    )
    dataset, truth = simgen.generate(sim)
    link_specs = lk.link_set("simulation")
    path = _data_path(cfg, out)
    save_dataset(dataset, link_specs, path)
    _prepend_comment(path, cfg["seed"], chash)
    truth_path = out / "truth.csv"
    truth.to_csv(truth_path, index=False)
    _prepend_comment(truth_path, cfg["seed"], chash)
    click.echo(f"wrote {path} ({dataset.n} rows) and {truth_path}")


def _load_problem(cfg, out_dir):
    link_specs = _links(cfg)
    dataset = load_dataset(_data_path(cfg, out_dir), _schema(cfg), link_specs)
    return dataset, link_specs


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--threads", type=int, default=None)
@click.option("--stop-rule", type=click.Choice(["ess", "cess"]), default=None)
@click.option("--j0", type=int, default=None)
@click.option("--particles", type=int, default=None)
@_guarded
def fit(config_path, seed, out_dir, threads, stop_rule, j0, particles):
    """Run the chain, then grow the truncation adaptively; dump particles."""
    cfg, chash = _load_cfg(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, link_specs = _load_problem(cfg, out)
    mc = cfg["mcmc"]
    thin = int(mc["thin"])
    iters = int(particles) * thin if particles else int(mc["iters"])
    settings = McmcSettings(
        j0=int(j0) if j0 else int(mc["j0"]),
        burnin=int(mc["burnin"]),
        iters=iters,
        thin=thin,
        seed=cfg["seed"],
    )
    prior_rng = RngPlan(cfg["seed"]).rng(RngPlan.PRIOR)
    hyper = build_empirical_prior(
        dataset,
        link_specs,
        g_factor=float(cfg["prior"]["g_factor"]),
        rng=prior_rng,
        censored_recipe=cfg["prior"]["censored_recipe"],
    )
    click.echo(
        f"fitting n={dataset.n} d={dataset.d} J0={settings.j0} "
        f"M={iters // thin} seed={cfg['seed']}"
    )
    pset = run_mcmc(
        dataset, hyper, link_specs, settings,
        trace_path=out / "trace.csv", progress=2000,
    )
    rule = StopRule(
        kind=stop_rule or cfg["smc"]["stop_rule"],
        delta_frac=float(cfg["smc"]["delta_frac"]),
        consecutive=int(cfg["smc"]["consecutive"]),
        m_star=int(cfg["smc"]["m_star"]),
        resample_frac=float(cfg["smc"]["resample_frac"]),
        max_extra=int(cfg["smc"]["max_extra"]),
    )
    pset, rows = adaptive_truncation_run(
        pset, dataset, hyper, link_specs, rule,
        threads=_threads(cfg, threads), log_path=out / "smc_log.csv",
    )
    meta = {"seed": cfg["seed"], "config_hash": chash}
    save_particles(pset, out / "particles.bin", meta=meta)
    write_json(
        out / "fit_meta.json",
        {
            **meta,
            "j_final": pset.J,
            "increments": len(rows),
            "resampled_rounds": int(sum(r["resampled"] for r in rows)),
            "ess_final": rows[-1]["ess"] if rows else float(pset.M),
        },
    )
    click.echo(f"stopped at truncation {pset.J} after {len(rows)} increments")


def _summed_dim(link_specs):
    for i, s in enumerate(link_specs):
        if s.kind == lk.SUM_CONSTRAINED:
            return i
    raise ValidationError("no summed response in this link set")


def _parse_quantity(token):
    name, _, arg = token.partition(":")
    name = name.strip()
    if name in ("success", "child_density", "child_not_yet"):
        return name, None
    if name in ("density", "median", "censor"):
        if not arg:
            raise ValidationError(f"{name} needs a dimension, e.g. {name}:1")
        return name, int(arg) - 1
    raise ValidationError(f"unknown quantity {token!r}")


@main.command()
@_config_opt
@_out_opt
@click.option("--dump", type=click.Path(), required=True)
@click.option("--xstar", type=click.Path(), required=True)
@click.option("--quantities", default="success", help="comma list, e.g. density:1,median:1,success")
@_guarded
def predict(config_path, out_dir, dump, xstar, quantities):
    """Evaluate predictive quantities at covariate rows; write a tidy table."""
    cfg, chash = _load_cfg(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pset, _ = load_particles(dump)
    link_specs = _links(cfg)
    schema = _schema(cfg)
    frame = pd.read_csv(xstar, comment="#")
    raw_cols = [f"x_{i + 1}" for i in range(schema.p)] + [
        f"cat_{i + 1}" for i in range(len(schema.categorical_levels))
    ]
    missing = [c for c in raw_cols if c not in frame.columns]
    if missing:
        raise ValidationError(f"x* file lacks columns {missing}")
    tokens = [_parse_quantity(t) for t in quantities.split(",") if t.strip()]
    binary_dims = [i for i, s in enumerate(link_specs) if s.kind == lk.SIGN]
    mc_samples = int(cfg["predict"]["mc_samples"])
    n_grid = int(cfg["predict"]["grid_points"])
    rows = []
    for rid, raw in frame[raw_cols].iterrows():
        x = expand_dummies(raw.to_numpy(dtype=float), schema).values
        for name, ell in tokens:
            if name == "success":
                if not binary_dims:
                    raise ValidationError("no thresholded response in this link set")
                val = prob_success_marginal(pset, x, binary_dims[0])
                rows.append((rid, "success", "", val))
            elif name == "censor":
                rows.append((rid, f"censor:{ell + 1}", "", censoring_probability(pset, x, ell)))
            elif name == "median":
                rows.append((rid, f"median:{ell + 1}", "", marginal_median(pset, x, ell)))
            elif name == "density":
                grid = default_grid(pset, x, ell, n_points=n_grid)
                vals = marginal_density(pset, x, ell, grid)
                rows.extend(
                    (rid, f"density:{ell + 1}", float(a), float(v))
                    for a, v in zip(grid.points, vals)
                )
            elif name == "child_density":
                base = _summed_dim(link_specs)
                spec = link_specs[base]
                grid = default_grid(pset, x, spec.base_dim, n_points=n_grid)
                vals = child_marginal_density(
                    pset, x, grid, mc_samples, base_dim=spec.base_dim, child_dim=base
                )
                rows.extend(
                    (rid, "child_density", float(a), float(v))
                    for a, v in zip(grid.points, vals)
                )
            elif name == "child_not_yet":
                base = _summed_dim(link_specs)
                spec = link_specs[base]
                val = child_not_yet_probability(
                    pset, x, mc_samples,
                    base_dim=spec.base_dim, child_dim=base,
                    censor_covariate_index=spec.censor_covariate_index,
                )
                rows.append((rid, "child_not_yet", "", val))
    path = out / "predictions.csv"
    write_csv(path, ["point", "quantity", "abscissa", "value"], rows)
    _prepend_comment(path, pset.seed, chash)
    click.echo(f"wrote {path} ({len(rows)} rows)")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--dump", type=click.Path(), required=True)
@_guarded
def check(config_path, seed, out_dir, dump):
    """Posterior predictive checks: p-values and survival-curve overlays."""
    cfg, chash = _load_cfg(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, link_specs = _load_problem(cfg, out)
    pset, _ = load_particles(dump)
    pvals = []
    for ell, spec in enumerate(link_specs):
        if spec.kind in (lk.FLOOR_EXP, lk.SUM_CONSTRAINED):
            for kind in ("cens", "noncens"):
                p = mt.posterior_predictive_pvalue(pset, dataset, link_specs, kind, ell)
                pvals.append((kind, ell + 1, p))
        elif spec.kind == lk.SIGN:
            p = mt.posterior_predictive_pvalue(pset, dataset, link_specs, "binary", ell)
            pvals.append(("binary", ell + 1, p))
    pv_path = out / "pvalues.csv"
    write_csv(pv_path, ["discrepancy", "dimension", "p_value"], pvals)
    _prepend_comment(pv_path, cfg["seed"], chash)

    Z_rep, cens_rep = mt.replicate(pset, dataset.X, link_specs)
    picks = np.unique(np.linspace(0, pset.M - 1, min(pset.M, 100)).astype(int))
    km_rows = []
    for ell, spec in enumerate(link_specs):
        if spec.kind not in (lk.FLOOR_EXP, lk.SUM_CONSTRAINED):
            continue
        horizon = dataset.X[:, spec.censor_covariate_index]
        obs_t = np.where(dataset.censored[:, ell], horizon, dataset.Z[:, ell])
        times, surv = mt.kaplan_meier(obs_t, dataset.censored[:, ell])
        km_rows.extend((ell + 1, "observed", t, s) for t, s in zip(times, surv))
        for m in picks:
            rep_t = np.where(cens_rep[m, :, ell], horizon, Z_rep[m, :, ell])
            times, surv = mt.kaplan_meier(rep_t, cens_rep[m, :, ell])
            km_rows.extend((ell + 1, f"rep{m}", t, s) for t, s in zip(times, surv))
    km_path = out / "km_overlay.csv"
    write_csv(km_path, ["dimension", "curve", "time", "survival"], km_rows)
    _prepend_comment(km_path, cfg["seed"], chash)

    write_json(
        out / "checks.json",
        {
            "seed": cfg["seed"],
            "config_hash": chash,
            "p_values": {f"{k}:z{d}": p for k, d, p in pvals},
        },
    )
    click.echo(f"wrote {pv_path}, {km_path}, checks.json")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--dump", type=click.Path(), required=True)
@_guarded
def score(config_path, seed, out_dir, dump):
    """Fit metrics: conditional ordinates, and oracle errors on simulated data."""
    cfg, chash = _load_cfg(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, link_specs = _load_problem(cfg, out)
    pset, _ = load_particles(dump)
    result = {"seed": cfg["seed"], "config_hash": chash, "lpml": {}}
    for ell in range(dataset.d):
        result["lpml"][f"z{ell + 1}"] = mt.lpml(pset, dataset, link_specs, ell)
    if cfg["links"]["set"] == "simulation":
        test_X, frame = mt.make_test_points(dataset)
        tp_path = out / "test_points.csv"
        frame.to_csv(tp_path, index=False)
        _prepend_comment(tp_path, cfg["seed"], chash)
        age = frame["x_1"].to_numpy()
        c2 = frame["cat_1"].to_numpy()
        c3 = frame["cat_2"].to_numpy()
        grid = PredictGrid.uniform(5.0, 40.0, 141)
        result["err_mean"] = {}
        result["err_dens"] = {}
        for ell in range(3):
            mu_t = simgen.true_mean(age, c2, c3, ell)
            result["err_mean"][f"z{ell + 1}"] = mt.err_mean(
                pset, test_X, mu_t, link_specs, ell
            )
            if link_specs[ell].kind == lk.SIGN:
                dens_t = np.stack([1.0 - mu_t, mu_t], axis=1)
                result["err_dens"][f"z{ell + 1}"] = mt.err_dens(
                    pset, test_X, dens_t, link_specs, ell
                )
            else:
                dens_t = simgen.true_density(
                    grid.points[None, :], age[:, None], c2[:, None], c3[:, None], ell
                )
                result["err_dens"][f"z{ell + 1}"] = mt.err_dens(
                    pset, test_X, dens_t, link_specs, ell, grid
                )
    write_json(out / "metrics.json", result)
    click.echo(f"wrote metrics.json: lpml={result['lpml']}")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@_guarded
def describe(config_path, seed, out_dir):
    """Print the resolved configuration and the data-derived prior."""
    cfg, chash = _load_cfg(config_path, seed)
    dataset, link_specs = _load_problem(cfg, out_dir)
    prior_rng = RngPlan(cfg["seed"]).rng(RngPlan.PRIOR)
    hyper = build_empirical_prior(
        dataset,
        link_specs,
        g_factor=float(cfg["prior"]["g_factor"]),
        rng=prior_rng,
        censored_recipe=cfg["prior"]["censored_recipe"],
    )
    click.echo(f"config hash: {chash}")
    for key, val in cfg.items():
        click.echo(f"{key}: {val}")
    click.echo(f"data: n={dataset.n} d={dataset.d} q+1={dataset.X.shape[1]}")
    np.set_printoptions(precision=4, suppress=True)
    click.echo(f"beta0:\n{hyper.beta0}")
    click.echo(f"U:\n{hyper.U}")
    click.echo(f"sigma0:\n{hyper.sigma0}")
    click.echo(f"nu: {hyper.nu}")
    click.echo(f"mu0: {hyper.mu0}  u: {hyper.u}")
    click.echo(f"alpha: {hyper.alpha}  gamma: {hyper.gamma}")
    click.echo(f"varrho:\n{hyper.varrho}")
    click.echo(f"zeta: {hyper.zeta}")


if __name__ == "__main__":
    main()
