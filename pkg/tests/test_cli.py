import json
import subprocess

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from bnpmixreg import cli

CONFIG = """\
seed = 4

[data]
n = 40

[mcmc]
j0 = 3
burnin = 200
iters = 200
thin = 20

[smc]
delta_frac = 1e9
consecutive = 2
m_star = 2
max_extra = 5

[predict]
mc_samples = 2000
grid_points = 128
"""


def _invoke(args):
    return CliRunner().invoke(cli.main, args, catch_exceptions=False)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One simulate plus fit, shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "run.toml"
    config.write_text(CONFIG)
    out = root / "out"
    res = _invoke(["simulate", "--config", str(config), "--out-dir", str(out)])
    assert res.exit_code == 0, res.output
    res = _invoke(["fit", "--config", str(config), "--out-dir", str(out)])
    assert res.exit_code == 0, res.output
    return {"config": config, "out": out, "dump": out / "particles.bin"}


def test_entry_point_help():
    proc = subprocess.run(
        ["bnpmixreg", "--help"], capture_output=True, text=True, timeout=60
    )
    assert proc.returncode == 0
    for name in ("simulate", "fit", "predict", "check", "score", "describe"):
        assert name in proc.stdout


def test_simulate_writes_commented_csv(pipeline):
    data = pipeline["out"] / "data.csv"
    first = data.read_text().splitlines()[0]
    assert first.startswith("# seed=4 config=")
    frame = pd.read_csv(data, comment="#")
    assert len(frame) == 40
    assert (pipeline["out"] / "truth.csv").exists()


def test_fit_outputs(pipeline):
    out = pipeline["out"]
    meta = json.loads((out / "fit_meta.json").read_text())
    assert meta["seed"] == 4
    assert meta["increments"] == 2
    assert meta["j_final"] == 5
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("iteration,loglik")
    log = (out / "smc_log.csv").read_text().splitlines()
    assert log[0] == "J,ess,cess,D,resampled,wall_s"
    assert pipeline["dump"].exists()


def test_fit_byte_identity(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text(CONFIG)
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert _invoke(["simulate", "--config", str(config), "--out-dir", str(out)]).exit_code == 0
        assert _invoke(["fit", "--config", str(config), "--out-dir", str(out)]).exit_code == 0
        outs.append(out)
    a, b = outs
    assert (a / "particles.bin").read_bytes() == (b / "particles.bin").read_bytes()
    assert (a / "fit_meta.json").read_text() == (b / "fit_meta.json").read_text()
    assert (a / "trace.csv").read_text() == (b / "trace.csv").read_text()


def test_predict_table(pipeline, tmp_path):
    xstar = tmp_path / "xstar.csv"
    pd.DataFrame({"x_1": [18.0, 24.0], "cat_1": [1, 2], "cat_2": [1, 2]}).to_csv(
        xstar, index=False
    )
    res = _invoke([
        "predict", "--config", str(pipeline["config"]), "--out-dir", str(tmp_path),
        "--dump", str(pipeline["dump"]), "--xstar", str(xstar),
        "--quantities", "success,median:1,censor:1,density:1",
    ])
    assert res.exit_code == 0, res.output
    table = pd.read_csv(tmp_path / "predictions.csv", comment="#")
    assert set(table["quantity"]) == {"success", "median:1", "censor:1", "density:1"}
    succ = table[table["quantity"] == "success"]["value"]
    assert len(succ) == 2 and ((0 <= succ) & (succ <= 1)).all()
    dens = table[(table["quantity"] == "density:1") & (table["point"] == 0)]
    assert len(dens) == 128
    total = np.trapezoid(dens["value"].to_numpy(), dens["abscissa"].to_numpy())
    assert total == pytest.approx(1.0, abs=0.02)


def test_predict_rejects_unknown_quantity(pipeline, tmp_path):
    xstar = tmp_path / "xstar.csv"
    pd.DataFrame({"x_1": [18.0], "cat_1": [1], "cat_2": [1]}).to_csv(xstar, index=False)
    res = CliRunner().invoke(cli.main, [
        "predict", "--config", str(pipeline["config"]), "--out-dir", str(tmp_path),
        "--dump", str(pipeline["dump"]), "--xstar", str(xstar),
        "--quantities", "histogram:1",
    ])
    assert res.exit_code == 2
    res = CliRunner().invoke(cli.main, [
        "predict", "--config", str(pipeline["config"]), "--out-dir", str(tmp_path),
        "--dump", str(pipeline["dump"]), "--xstar", str(xstar),
        "--quantities", "child_not_yet",
    ])
    assert res.exit_code == 2


def test_predict_rejects_missing_columns(pipeline, tmp_path):
    xstar = tmp_path / "bad.csv"
    pd.DataFrame({"x_1": [18.0]}).to_csv(xstar, index=False)
    res = CliRunner().invoke(cli.main, [
        "predict", "--config", str(pipeline["config"]), "--out-dir", str(tmp_path),
        "--dump", str(pipeline["dump"]), "--xstar", str(xstar),
    ])
    assert res.exit_code == 2


def test_check_outputs(pipeline, tmp_path):
    res = _invoke([
        "check", "--config", str(pipeline["config"]), "--out-dir", str(tmp_path),
        "--dump", str(pipeline["dump"]),
    ])
    # check reads data.csv from its own out dir unless configured
    assert res.exit_code == 2


def test_check_and_score_on_fit_dir(pipeline):
    out = pipeline["out"]
    res = _invoke([
        "check", "--config", str(pipeline["config"]), "--out-dir", str(out),
        "--dump", str(pipeline["dump"]),
    ])
    assert res.exit_code == 0, res.output
    checks = json.loads((out / "checks.json").read_text())
    assert set(checks["p_values"]) == {
        "cens:z1", "noncens:z1", "cens:z2", "noncens:z2", "binary:z3",
    }
    for val in checks["p_values"].values():
        assert np.isnan(val) or 0.0 <= val <= 1.0
    km = pd.read_csv(out / "km_overlay.csv", comment="#")
    assert {"observed"} <= set(km["curve"])
    assert ((km["survival"] >= 0) & (km["survival"] <= 1)).all()

    res = _invoke([
        "score", "--config", str(pipeline["config"]), "--out-dir", str(out),
        "--dump", str(pipeline["dump"]),
    ])
    assert res.exit_code == 0, res.output
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics["lpml"]) == {"z1", "z2", "z3"}
    assert set(metrics["err_mean"]) == {"z1", "z2", "z3"}
    assert set(metrics["err_dens"]) == {"z1", "z2", "z3"}
    # the binary errors are bounded whatever the fit quality; the event-age
    # lognormal means can blow up under a deliberately under-burned smoke fit
    assert 0.0 <= metrics["err_mean"]["z3"] <= 100.0
    assert 0.0 <= metrics["err_dens"]["z3"] <= 200.0


def test_describe_prints_prior(pipeline):
    res = _invoke([
        "describe", "--config", str(pipeline["config"]), "--out-dir", str(pipeline["out"]),
    ])
    assert res.exit_code == 0, res.output
    assert "config hash:" in res.output
    assert "beta0:" in res.output
    assert "data: n=40 d=3" in res.output


def test_missing_data_file_exits_cleanly(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text(CONFIG)
    res = CliRunner().invoke(cli.main, [
        "fit", "--config", str(config), "--out-dir", str(tmp_path),
    ])
    assert res.exit_code == 2


def test_bad_config_exits_cleanly(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text("[mcmc]\nj_zero = 4\n")
    res = CliRunner().invoke(cli.main, [
        "describe", "--config", str(config), "--out-dir", str(tmp_path),
    ])
    assert res.exit_code == 2
