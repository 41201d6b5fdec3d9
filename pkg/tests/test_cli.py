from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from regime_factor.cli import main, read_fit, read_truth, write_fit, write_truth
from regime_factor.model import FitResult, Panel, ProbSeries, RegimeParams, StaticState
from regime_factor.simulate import SimConfig, SimTruth


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--N", "30", "--T", "120", "--seed", "4", "--out", str(out)]) == 0
    return out


def test_simulate_files_and_pattern2_break(tmp_path):
    out = tmp_path / "s"
    assert main(["simulate", "--seed", "1", "--out", str(out)]) == 0
    for name in ("panel.csv", "truth_states.csv", "truth_factors.csv", "truth_loadings_1.csv",
                 "truth_loadings_2.csv"):
        assert (out / name).exists()
    states = pd.read_csv(out / "truth_states.csv")
    assert len(states) == 300 and len(pd.read_csv(out / "panel.csv")) == 300
    switch = states["t"][states["regime"].diff() != 0].tolist()
    assert switch == [1, 151]


def test_simulate_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--N", "20", "--T", "60", "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_simulate_round_trip(sim_dir):
    truth = read_truth(sim_dir)
    assert truth.panel.values.shape == (120, 30)
    assert truth.states[59] == 0 and truth.states[60] == 1
    assert truth.config.seed == 4


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("REGIME_FACTOR_SEED", "9")
    assert main(["simulate", "--N", "20", "--T", "60", "--out", str(tmp_path / "env")]) == 0
    assert main(["simulate", "--N", "20", "--T", "60", "--seed", "9", "--out", str(tmp_path / "flag")]) == 0
    assert _files(tmp_path / "env") == _files(tmp_path / "flag")


def test_config_file_with_override(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[simulate]\nN = 12\nT = 40\nseed = 2\n")
    assert main(["simulate", "--config", str(cfg), "--T", "50", "--out", str(tmp_path / "o")]) == 0
    assert pd.read_csv(tmp_path / "o" / "panel.csv").shape == (50, 12)


def test_fit_static_and_dynamic_contracts(sim_dir, tmp_path):
    panel = str(sim_dir / "panel.csv")
    assert main(["fit", panel, "--mode", "static", "--trials", "2", "--seed", "1", "--jobs", "1",
                 "--out", str(tmp_path / "st")]) == 0
    assert main(["fit", panel, "--mode", "dynamic", "--trials", "2", "--seed", "1", "--jobs", "1",
                 "--out", str(tmp_path / "dy")]) == 0
    assert not (tmp_path / "st" / "pairwise_probs.csv").exists()
    assert (tmp_path / "st" / "qhat.csv").exists()
    pw = pd.read_csv(tmp_path / "dy" / "pairwise_probs.csv")
    assert pw["t"].iloc[0] == 2 and len(pw) == 119
    assert (tmp_path / "dy" / "Q.csv").exists()
    for mode in ("st", "dy"):
        probs = pd.read_csv(tmp_path / mode / "probs.csv")
        np.testing.assert_allclose(probs[["p1", "p2"]].sum(axis=1), 1, atol=1e-10)
        rec = json.loads((tmp_path / mode / "fit.json").read_text())
        assert rec["seed"] == 1 and 1 <= rec["winning_trial"] <= 2
        assert isinstance(rec["converged"], bool)
        assert rec["config"]["factors"] == [2, 2]
    fit = read_fit(tmp_path / "dy")
    assert fit.probs.pairwise is not None and fit.params.dims == (2, 2)


def test_fit_single_regime_matches_pca(sim_dir, tmp_path):
    assert main(["fit", str(sim_dir / "panel.csv"), "--regimes", "1", "--factors", "2", "--trials", "1",
                 "--seed", "0", "--jobs", "1", "--out", str(tmp_path / "pca")]) == 0
    X = read_truth(sim_dir).panel.values
    lam = pd.read_csv(tmp_path / "pca" / "loadings_1.csv").to_numpy()
    vecs = np.linalg.eigh(X.T @ X / X.shape[0])[1][:, -2:]
    # same column space as the leading eigenvectors of the sample covariance
    P = vecs @ vecs.T
    np.testing.assert_allclose(P @ lam, lam, atol=1e-8)


def test_fit_deterministic_across_jobs(sim_dir, tmp_path):
    panel = str(sim_dir / "panel.csv")
    for jobs in ("1", "2"):
        assert main(["fit", panel, "--mode", "dynamic", "--trials", "3", "--seed", "5", "--jobs", jobs,
                     "--out", str(tmp_path / jobs)]) == 0
    assert _files(tmp_path / "1") == _files(tmp_path / "2")


def test_fit_nonconvergence_exit_code(sim_dir, tmp_path):
    code = main(["fit", str(sim_dir / "panel.csv"), "--trials", "1", "--max-iter", "1", "--seed", "0",
                 "--jobs", "1", "--out", str(tmp_path / "nc")])
    assert code == 4
    assert (tmp_path / "nc" / "fit.json").exists()


def test_input_error_exit_codes(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["fit", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--pattern", "7", "--out", str(tmp_path / "o")]) == 2


def test_detect_step_function(tmp_path):
    p = np.r_[np.zeros(20), np.ones(20)]
    pd.DataFrame({"t": np.arange(1, 41), "p1": 1 - p, "p2": p}).to_csv(tmp_path / "probs.csv", index=False)
    assert main(["detect", str(tmp_path / "probs.csv"), "--out", str(tmp_path / "det")]) == 0
    tp = pd.read_csv(tmp_path / "det" / "turning_points.csv")
    assert len(tp) == 1 and tp["t"].iloc[0] == 21 and tp["direction"].iloc[0] == "enter"
    report = (tmp_path / "det" / "report.txt").read_text().splitlines()
    assert report[0].split() == ["Recession"] and report[2].split()[:2] == ["This", "method"]


def test_detect_with_truth_reports_lags(tmp_path):
    z = np.r_[np.ones(20, int), 2 * np.ones(20, int)]
    p = np.r_[np.zeros(20), np.zeros(2), np.ones(18)]
    pd.DataFrame({"t": np.arange(1, 41), "p1": 1 - p, "p2": p}).to_csv(tmp_path / "probs.csv", index=False)
    pd.DataFrame({"t": np.arange(1, 41), "regime": z}).to_csv(tmp_path / "states.csv", index=False)
    assert main(["detect", str(tmp_path / "probs.csv"), "--truth", str(tmp_path / "states.csv"),
                 "--out", str(tmp_path / "det")]) == 0
    report = (tmp_path / "det" / "report.txt").read_text().splitlines()
    assert report[2].split() == ["This", "method", "3"]


def _perfect_truth_and_fit():
    N, T = 20, 40
    z = (np.arange(T) >= 20).astype(int)
    rng = np.random.default_rng(0)
    F = np.zeros((T, 2))
    for j in range(2):
        U, _ = np.linalg.qr(rng.standard_normal((20, 2)))
        F[z == j] = U * np.sqrt(20)
    lams = [np.linalg.qr(rng.standard_normal((N, 2)))[0] * np.sqrt(N) for _ in range(2)]
    truth = SimTruth(Panel(rng.standard_normal((T, N))), F, lams, z, config=SimConfig(N=N, T=T))
    fit = FitResult(RegimeParams(tuple(lams), 1e-9), StaticState(np.array([0.5, 0.5])),
                    ProbSeries(np.eye(2)[z]), F, [0.0], 1, True, 0)
    return truth, fit


def test_eval_perfect_fit(tmp_path):
    truth, fit = _perfect_truth_and_fit()
    (tmp_path / "truth").mkdir()
    (tmp_path / "fit").mkdir()
    write_truth(tmp_path / "truth", truth)
    write_fit(tmp_path / "fit", fit)
    (tmp_path / "fit" / "fit.json").write_text(json.dumps({"sigma2": 1e-9, "state": {"q": [0.5, 0.5]}}))
    assert main(["eval", "--truth", str(tmp_path / "truth"), "--fit", str(tmp_path / "fit"),
                 "--out", str(tmp_path / "metrics.csv")]) == 0
    row = pd.read_csv(tmp_path / "metrics.csv").iloc[0]
    for key in ("R2_l1", "R2_l2", "R2_f", "R2_Hf"):
        assert row[key] == pytest.approx(1.0, abs=1e-6)
    assert row["class_mean_error"] == 0


def test_table1_smoke(tmp_path):
    out = tmp_path / "t1.csv"
    assert main(["table1", "--patterns", "2,4", "--N", "30", "--T", "90", "--replications", "2",
                 "--trials", "2", "--seed", "0", "--jobs", "1", "--out", str(out)]) == 0
    df = pd.read_csv(out)
    assert len(df) == 2
    assert df["Q11_err"].iloc[0] == "N.A."


def test_plotdata(sim_dir, tmp_path):
    probs = tmp_path / "probs.csv"
    p = np.linspace(0, 1, 120)
    pd.DataFrame({"t": np.arange(1, 121), "p1": 1 - p, "p2": p}).to_csv(probs, index=False)
    samples = tmp_path / "samples.csv"
    v = np.random.default_rng(0).standard_normal(100)
    pd.DataFrame({"target": ["loading"] * 50 + ["factor"] * 50, "value": v}).to_csv(samples, index=False)
    out = tmp_path / "plots"
    assert main(["plotdata", "--probs", str(probs), "--truth", str(sim_dir / "truth_states.csv"),
                 "--samples", str(samples), "--bins", "10", "--out", str(out)]) == 0
    path = pd.read_csv(out / "probability_path.csv")
    assert list(path.columns) == ["t", "prob", "true_state"] and len(path) == 120
    hist = pd.read_csv(out / "histograms.csv")
    assert hist.groupby("target")["count"].sum().tolist() == [50, 50]
    first = _files(out)
    shutil.rmtree(out)
    assert main(["plotdata", "--probs", str(probs), "--truth", str(sim_dir / "truth_states.csv"),
                 "--samples", str(samples), "--bins", "10", "--out", str(out)]) == 0
    assert _files(out) == first
    assert {"probability_path.svg", "histogram_loading.svg", "histogram_factor.svg"} <= set(first)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "regime_factor.cli", "simulate", "--N", "5", "--T", "20",
                          "--seed", "0", "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run([sys.executable, "-m", "regime_factor.cli", "fit", str(tmp_path / "nope.csv"),
                          "--out", str(tmp_path / "y")], capture_output=True, text=True)
    assert res.returncode == 2 and "input error" in res.stderr
