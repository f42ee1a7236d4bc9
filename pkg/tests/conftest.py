"""Shared test plumbing: fixtures for a small fitted model and the
acceptance-criteria result banner."""

import numpy as np
import pytest

_CRITERIA = []


def record_criterion(name, passed, detail=""):
    _CRITERIA.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        status = "PASS" if ok else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


def clone_particles(pset):
    """Deep copy so tests that extend or resample do not poison fixtures."""
    from bnpmixreg.particles import ParticleSet

    new = ParticleSet(
        v=pset.v.copy(), psi_mu=pset.psi_mu.copy(), psi_tau=pset.psi_tau.copy(),
        psi_rho=pset.psi_rho.copy(), beta=pset.beta.copy(), sigma=pset.sigma.copy(),
        y=pset.y.copy(), log_weights=pset.log_weights.copy(), seed=pset.seed,
        rejuv_round=pset.rejuv_round,
    )
    for name in ("lse_a", "lse_ab", "log_remain"):
        arr = getattr(pset, name)
        if arr is not None:
            setattr(new, name, arr.copy())
    return new


@pytest.fixture(scope="session")
def sim_fit():
    """A small but genuine fit of simulated data: n=60, J0=3, M=6 particles."""
    from bnpmixreg import links as lk
    from bnpmixreg.mcmc import McmcSettings, run_mcmc
    from bnpmixreg.model import build_empirical_prior
    from bnpmixreg.simgen import SimConfig, generate
    from bnpmixreg.util import RngPlan

    dataset, _ = generate(SimConfig(n=60, seed=12))
    link_specs = lk.link_set("simulation")
    hyper = build_empirical_prior(
        dataset, link_specs, 10.0, RngPlan(12).rng(RngPlan.PRIOR)
    )
    settings = McmcSettings(j0=3, burnin=300, iters=600, thin=100, seed=12)
    pset = run_mcmc(dataset, hyper, link_specs, settings)
    return {
        "dataset": dataset,
        "hyper": hyper,
        "pset": pset,
        "links": link_specs,
    }
