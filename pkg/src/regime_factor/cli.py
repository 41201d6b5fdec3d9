"""Command-line interface: ``regime-factor <subcommand>``.

Subcommands: simulate, fit, detect, eval, table1, plotdata.

Every option may also be given in an INI config file (``--config``) under a
section named after the subcommand, with dashes replaced by underscores;
command-line flags take precedence.  The seed falls back to the
``REGIME_FACTOR_SEED`` environment variable, then to 0.

Output CSVs use 1-based periods ``t`` and 1-based regime labels.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import data_io
from .data_io import FLOAT_FORMAT, ParseError
from .detect import (
    ENTER,
    EXIT,
    DetectorConfig,
    detect_turning_points,
    format_report,
    match_reference,
    realtime_detect,
)
from .em_dynamic import fit_dynamic
from .em_static import EMConfig, fit_static
from .evaluate import (
    Cell,
    DegenerateFitError,
    InsufficientSampleError,
    ZeroVarianceError,
    classification_report,
    match_regimes,
    r2_factors,
    r2_loading_space,
    table1_run,
    transition_errors,
)
from .model import (
    DegenerateWeightsError,
    FitFailureError,
    FitResult,
    InvalidInputError,
    MarkovState,
    NumericalUnderflowError,
    ProbSeries,
    RegimeParams,
    StaticState,
)
from .simulate import SimConfig, SimTruth, read_label_file, simulate_panel

log = logging.getLogger("regime_factor")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_NONCONVERGED = 0, 2, 3, 4


class NonConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _write_csv(path: Path, df: pd.DataFrame) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _t_column(T: int) -> np.ndarray:
    return np.arange(1, T + 1)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise InvalidInputError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise InvalidInputError(f"expected comma-separated numbers, got {text!r}") from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Merge built-in defaults, the config-file section and explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(args.config):
            raise InvalidInputError(f"cannot read config file {args.config}")
        if cp.has_section(args.command):
            for key, value in cp.items(args.command):
                key = key.replace("-", "_")
                if key not in defaults:
                    raise InvalidInputError(f"unknown key {key!r} in [{args.command}]")
                merged[key] = _coerce(value, defaults[key])
    for key, value in vars(args).items():
        if value is not None:
            merged[key] = value
    if merged.get("seed") is None:
        env = os.environ.get("REGIME_FACTOR_SEED")
        merged["seed"] = int(env) if env else 0
    merged["seed"] = int(merged["seed"])
    if merged.get("jobs") is None and "jobs" in defaults:
        merged["jobs"] = os.cpu_count() or 1
    return argparse.Namespace(**merged)


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _load_matrix_panel(path: str, standardize: bool = False):
    table = data_io.load_panel(path, date_column="auto")
    if standardize:
        panel, _ = data_io.balance_and_standardize(table)
        return panel, table.dates
    if table.missing.any():
        raise InvalidInputError(f"{path}: panel has missing cells; use --standardize to drop those series")
    from .model import Panel

    return Panel(table.values), table.dates


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

SIM_DEFAULTS = dict(N=100, T=300, dgp=1, pattern=2, rho=0.0, alpha=0.0, beta=0.0, r2=0.5,
                    q11=0.95, q22=0.72, labels=None, seed=None, out=None)


def write_truth(out: Path, truth: SimTruth) -> None:
    T = truth.panel.T
    data_io.write_panel(out / "panel.csv", truth.panel.values)
    _write_csv(out / "truth_states.csv", pd.DataFrame({"t": _t_column(T), "regime": truth.states + 1}))
    f = pd.DataFrame(truth.factors, columns=[f"f{k + 1}" for k in range(truth.factors.shape[1])])
    f.insert(0, "t", _t_column(T))
    _write_csv(out / "truth_factors.csv", f)
    for j, lam in enumerate(truth.loadings):
        _write_csv(out / f"truth_loadings_{j + 1}.csv",
                   pd.DataFrame(lam, columns=[f"l{k + 1}" for k in range(lam.shape[1])]))
    cfg = asdict(truth.config)
    cfg["labels"] = None if truth.config.labels is None else "user-supplied"
    _write_json(out / "truth_config.json", cfg)


def cmd_simulate(args) -> int:
    a = _resolve(args, SIM_DEFAULTS)
    if a.out is None:
        raise InvalidInputError("--out is required")
    labels = tuple(int(v) for v in read_label_file(a.labels)) if a.labels else None
    cfg = SimConfig(N=int(a.N), T=int(a.T), dgp=int(a.dgp), pattern=int(a.pattern), rho=float(a.rho),
                    alpha=float(a.alpha), beta=float(a.beta), r2=float(a.r2), q11=float(a.q11),
                    q22=float(a.q22), labels=labels, seed=a.seed)
    truth = simulate_panel(cfg)
    write_truth(_out_dir(a.out), truth)
    return EXIT_OK


def read_truth(truth_dir: str | Path) -> SimTruth:
    d = Path(truth_dir)
    panel = data_io.load_panel(d / "panel.csv")
    states = pd.read_csv(d / "truth_states.csv")["regime"].to_numpy(dtype=int) - 1
    factors = pd.read_csv(d / "truth_factors.csv").drop(columns="t").to_numpy(dtype=float)
    loadings = []
    j = 1
    while (d / f"truth_loadings_{j}.csv").exists():
        loadings.append(pd.read_csv(d / f"truth_loadings_{j}.csv").to_numpy(dtype=float))
        j += 1
    cfg_path = d / "truth_config.json"
    config = None
    if cfg_path.exists():
        raw = json.loads(cfg_path.read_text())
        raw["labels"] = None
        config = SimConfig(**raw)
    from .model import Panel

    return SimTruth(Panel(panel.values), factors, loadings, states, {}, config)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

FIT_DEFAULTS = dict(panel=None, mode="static", regimes=2, factors="2,2", trials=30, tol=1e-7,
                    max_iter=500, seed=None, fix_sigma2=None, C=10.0, estimate_state=False,
                    q11=None, q22=None, jobs=None, standardize=False, out=None)


def _fit_config(a) -> tuple[tuple[int, ...], EMConfig]:
    dims = tuple(_int_list(a.factors))
    if len(dims) == 1 and int(a.regimes) > 1:
        dims = dims * int(a.regimes)
    if len(dims) != int(a.regimes) or int(a.regimes) < 1:
        raise InvalidInputError(f"--factors must list {a.regimes} counts, got {a.factors!r}")
    fixed = a.fix_sigma2 is not None and a.fix_sigma2 is not False
    cfg = EMConfig(n_trials=int(a.trials), tol=float(a.tol), max_iter=int(a.max_iter), seed=a.seed,
                   sigma2_mode="fixed" if fixed else "estimate",
                   sigma2_fixed=float(a.fix_sigma2) if fixed else 1.0, C=float(a.C),
                   estimate_state=bool(a.estimate_state), jobs=int(a.jobs))
    return dims, cfg


def _markov_from_args(a, J: int) -> MarkovState | None:
    if a.q11 is None and a.q22 is None:
        return None
    if J != 2:
        raise InvalidInputError("--q11/--q22 apply to two regimes only")
    return MarkovState.two_state(float(a.q11 if a.q11 is not None else 0.5),
                                 float(a.q22 if a.q22 is not None else 0.5))


def write_fit(out: Path, fit: FitResult) -> None:
    T, J = fit.probs.T, fit.probs.J
    for j, lam in enumerate(fit.params.loadings):
        _write_csv(out / f"loadings_{j + 1}.csv", pd.DataFrame(lam, columns=[f"l{k + 1}" for k in range(lam.shape[1])]))
    probs = pd.DataFrame(fit.probs.marginal, columns=[f"p{j + 1}" for j in range(J)])
    probs.insert(0, "t", _t_column(T))
    _write_csv(out / "probs.csv", probs)
    if fit.mode == "dynamic" and fit.probs.pairwise is not None:
        pw = fit.probs.pairwise.reshape(T - 1, J * J)
        cols = [f"p{j + 1}_{k + 1}" for j in range(J) for k in range(J)]
        df = pd.DataFrame(pw, columns=cols)
        df.insert(0, "t", np.arange(2, T + 1))
        _write_csv(out / "pairwise_probs.csv", df)
    fac = pd.DataFrame(fit.factors, columns=[f"f{k + 1}" for k in range(fit.factors.shape[1])])
    fac.insert(0, "t", _t_column(T))
    _write_csv(out / "factors.csv", fac)
    if isinstance(fit.state, MarkovState):
        Q = pd.DataFrame(fit.state.Q, columns=[f"from{k + 1}" for k in range(J)])
        Q.insert(0, "to", np.arange(1, J + 1))
        _write_csv(out / "Q.csv", Q)
    else:
        _write_csv(out / "qhat.csv", pd.DataFrame({"regime": np.arange(1, J + 1), "q": fit.state.q}))
    _write_csv(out / "loglik_trace.csv", pd.DataFrame({"iteration": np.arange(1, len(fit.loglik_trace) + 1),
                                                       "loglik": fit.loglik_trace}))


def _fit_record(a, dims, cfg: EMConfig, fit: FitResult | None, panel_path: str, markov) -> dict:
    rec = {
        "input": {"panel": str(panel_path), "sha256": _sha256(Path(panel_path)), "standardize": bool(a.standardize)},
        "config": {"mode": a.mode, "regimes": len(dims), "factors": list(dims), "trials": cfg.n_trials,
                   "tol": cfg.tol, "max_iter": cfg.max_iter, "sigma2_mode": cfg.sigma2_mode,
                   "sigma2_fixed": cfg.sigma2_fixed, "C": cfg.C, "estimate_state": cfg.estimate_state,
                   "initial_Q": None if markov is None else markov.Q.tolist(),
                   "initial_phi": None if markov is None else markov.phi.tolist()},
        "seed": cfg.seed,
    }
    if fit is not None:
        state = fit.state
        rec.update({
            "winning_trial": fit.trial_index + 1,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "loglik": fit.loglik,
            "sigma2": fit.params.sigma2,
            "state": {"Q": state.Q.tolist(), "phi": state.phi.tolist()} if isinstance(state, MarkovState)
            else {"q": state.q.tolist()},
            "trials": [dict(d, trial=d["trial"] + 1) for d in fit.diagnostics["trials"]],
            "eigen_ties": fit.diagnostics.get("eigen_ties", False),
        })
    return rec


def cmd_fit(args) -> int:
    a = _resolve(args, FIT_DEFAULTS)
    if a.panel is None or a.out is None:
        raise InvalidInputError("a panel path and --out are required")
    if a.mode not in ("static", "dynamic"):
        raise InvalidInputError("--mode must be static or dynamic")
    panel, _ = _load_matrix_panel(a.panel, bool(a.standardize))
    dims, cfg = _fit_config(a)
    markov = _markov_from_args(a, len(dims))
    out = _out_dir(a.out)
    try:
        fit = fit_static(panel, dims, None, cfg) if a.mode == "static" else fit_dynamic(panel, dims, markov, cfg)
    except FitFailureError as exc:
        rec = _fit_record(a, dims, cfg, None, a.panel, markov)
        rec["error"] = str(exc)
        rec["trials"] = [dict(d, trial=d["trial"] + 1) for d in exc.diagnostics]
        _write_json(out / "fit.json", rec)
        raise
    write_fit(out, fit)
    _write_json(out / "fit.json", _fit_record(a, dims, cfg, fit, a.panel, markov))
    if not any(d.get("converged") for d in fit.diagnostics["trials"]):
        raise NonConvergenceError("no EM trial converged within max_iter")
    return EXIT_OK


def read_fit(fit_dir: str | Path) -> FitResult:
    d = Path(fit_dir)
    rec = json.loads((d / "fit.json").read_text())
    loadings = []
    j = 1
    while (d / f"loadings_{j}.csv").exists():
        loadings.append(pd.read_csv(d / f"loadings_{j}.csv").to_numpy(dtype=float))
        j += 1
    J = len(loadings)
    marginal = pd.read_csv(d / "probs.csv").drop(columns="t").to_numpy(dtype=float)
    pairwise = None
    if (d / "pairwise_probs.csv").exists():
        pairwise = pd.read_csv(d / "pairwise_probs.csv").drop(columns="t").to_numpy(dtype=float).reshape(-1, J, J)
    factors = pd.read_csv(d / "factors.csv").drop(columns="t").to_numpy(dtype=float)
    trace = pd.read_csv(d / "loglik_trace.csv")["loglik"].tolist() if (d / "loglik_trace.csv").exists() else [np.nan]
    st = rec.get("state", {})
    state = MarkovState(np.array(st["Q"]), np.array(st["phi"])) if "Q" in st else StaticState(np.array(st.get("q", np.full(J, 1 / J))))
    return FitResult(RegimeParams(tuple(loadings), float(rec.get("sigma2", 1.0))), state,
                     ProbSeries(marginal, pairwise), factors, trace, int(rec.get("iterations", 0)),
                     bool(rec.get("converged", True)), int(rec.get("winning_trial", 1)) - 1,
                     rec.get("config", {}).get("mode", "static"))


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

DETECT_DEFAULTS = dict(probs=None, panel=None, realtime=False, regime=2, d=0, enter=None, exit=None,
                       initial_phase=1, truth=None, factors="2,2", warmup=None, labels=None, stride=1,
                       trials=5, q11=0.95, q22=0.72, no_standardize=False, seed=None, out=None)


def _reference_events(states: np.ndarray, regime: int, start: int = 0) -> list[tuple[int, str]]:
    inside = states == regime
    return [(t, ENTER if inside[t] else EXIT) for t in range(max(start, 1), states.size) if inside[t] != inside[t - 1]]


def _tracked_probability(path: str, regime: int, truth_states: np.ndarray | None) -> np.ndarray:
    """Probability column of ``regime`` (0-based); with known truth the
    fitted regimes are first matched to the true ones."""
    df = pd.read_csv(path)
    marginal = df.drop(columns=[c for c in ("t",) if c in df.columns]).to_numpy(dtype=float)
    if not 0 <= regime < marginal.shape[1]:
        raise InvalidInputError(f"{path} has no probability column for regime {regime + 1}")
    if truth_states is not None:
        if truth_states.size != marginal.shape[0]:
            raise InvalidInputError("truth states and probabilities differ in length")
        return marginal[:, match_regimes(truth_states, marginal)[regime]]
    return marginal[:, regime]


def cmd_detect(args) -> int:
    a = _resolve(args, DETECT_DEFAULTS)
    if a.out is None:
        raise InvalidInputError("--out is required")
    regime = int(a.regime) - 1
    out = _out_dir(a.out)
    truth_states = None
    if a.truth:
        truth_states = pd.read_csv(a.truth)["regime"].to_numpy(dtype=int) - 1
    dates = None
    start = 0
    if a.realtime:
        if a.panel is None:
            raise InvalidInputError("--realtime needs --panel")
        enter = 0.8 if a.enter is None else float(a.enter)
        exit_ = 0.2 if a.exit is None else float(a.exit)
        panel, dates = _load_matrix_panel(a.panel)
        dims = tuple(_int_list(a.factors))
        labels = read_label_file(a.labels) if a.labels else None
        det = DetectorConfig(0, enter, exit_, int(a.initial_phase) - 1)
        markov = MarkovState.two_state(float(a.q11), float(a.q22)) if len(dims) == 2 else None
        res = realtime_detect(panel, dims, det, EMConfig(n_trials=int(a.trials), seed=a.seed),
                              None if a.warmup is None else int(a.warmup), markov=markov, labels=labels,
                              regime=regime, stride=int(a.stride), standardize=not a.no_standardize)
        _write_csv(out / "realtime_probs.csv", pd.DataFrame({"t": res.periods + 1, "prob": res.probabilities}))
        tps = res.turning_points
        start = int(res.periods[0])
    else:
        if a.probs is None:
            raise InvalidInputError("give a probs.csv path or --realtime --panel")
        enter = 0.9 if a.enter is None else float(a.enter)
        exit_ = 0.1 if a.exit is None else float(a.exit)
        series = _tracked_probability(a.probs, regime, truth_states)
        det = DetectorConfig(int(a.d), enter, exit_, int(a.initial_phase) - 1)
        tps = detect_turning_points(series, det)
    rows = pd.DataFrame({
        "t": [p.t + 1 for p in tps],
        "direction": [p.direction for p in tps],
        "trigger_t": [p.trigger + 1 for p in tps],
        "detection_lag": [p.detection_lag for p in tps],
    })
    if dates is not None:
        rows.insert(1, "date", [dates[p.t] for p in tps])
    _write_csv(out / "turning_points.csv", rows)
    reference = _reference_events(truth_states, regime, start) if truth_states is not None else None
    (out / "report.txt").write_text(format_report(tps, dates, reference))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / table1 / plotdata
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = dict(truth=None, fit=None, out=None, seed=None)


def evaluate_dirs(truth_dir, fit_dir) -> dict:
    truth = read_truth(truth_dir)
    fit = read_fit(fit_dir)
    row = {f"R2_l{j + 1}": r2_loading_space(truth, fit, j) for j in range(len(truth.loadings))}
    row["R2_f"] = r2_factors(truth, fit, rotated=False)
    row["R2_Hf"] = r2_factors(truth, fit, rotated=True)
    rep = classification_report(truth, fit.probs)
    row["class_mean_error"] = rep["mean_abs_error"]
    row["class_sup_error"] = rep["sup_abs_error"]
    if fit.probs.pairwise is not None and truth.config is not None and len(truth.loadings) == 2:
        row["Q11_err"], row["Q22_err"] = transition_errors(truth, fit)
    return row


def cmd_eval(args) -> int:
    a = _resolve(args, EVAL_DEFAULTS)
    if not (a.truth and a.fit and a.out):
        raise InvalidInputError("--truth, --fit and --out are required")
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, pd.DataFrame([evaluate_dirs(a.truth, a.fit)]))
    return EXIT_OK


TABLE1_DEFAULTS = dict(patterns="2", algorithms="smoothed", dgps="1", rho="0", alpha="0", beta="0",
                       N="100", T="300", replications=50, trials=5, seed=None, jobs=None, out=None,
                       samples_out=None)


def grid_cells(a) -> list[Cell]:
    import itertools

    combos = itertools.product(_int_list(a.patterns), str(a.algorithms).replace(" ", "").split(","),
                               _int_list(a.dgps), _float_list(a.rho), _float_list(a.alpha),
                               _float_list(a.beta), _int_list(a.N), _int_list(a.T))
    return [Cell(p, alg, dgp, rho, al, be, n, t) for p, alg, dgp, rho, al, be, n, t in combos]


def cmd_table1(args) -> int:
    a = _resolve(args, TABLE1_DEFAULTS)
    if a.out is None:
        raise InvalidInputError("--out is required")
    cells = grid_cells(a)
    samples: dict | None = {} if a.samples_out else None
    rows = table1_run(cells, int(a.replications), int(a.trials), a.seed, int(a.jobs), samples)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, pd.DataFrame(rows).fillna("N.A."))
    if a.samples_out:
        recs = []
        for cell, s in (samples or {}).items():
            for target in ("loading", "factor"):
                for rep, v in enumerate(s[target][:, 0]):
                    recs.append({"pattern": cell.pattern, "algorithm": cell.algorithm, "dgp": cell.dgp,
                                 "N": cell.N, "T": cell.T, "target": target, "rep": rep + 1, "value": v})
        _write_csv(Path(a.samples_out), pd.DataFrame(recs, columns=["pattern", "algorithm", "dgp", "N", "T",
                                                                   "target", "rep", "value"]))
    return EXIT_OK


PLOT_DEFAULTS = dict(probs=None, truth=None, regime=2, samples=None, bins=30, svg=True, out=None, seed=None)


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "regime-factor"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(plt, fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def cmd_plotdata(args) -> int:
    a = _resolve(args, PLOT_DEFAULTS)
    if a.out is None or not (a.probs or a.samples):
        raise InvalidInputError("--out and at least one of --probs/--samples are required")
    out = _out_dir(a.out)
    if a.probs:
        st = pd.read_csv(a.truth)["regime"].to_numpy(dtype=int) if a.truth else None
        prob = _tracked_probability(a.probs, int(a.regime) - 1, None if st is None else st - 1)
        path = pd.DataFrame({"t": _t_column(prob.size), "prob": prob})
        if st is not None:
            path["true_state"] = st
        _write_csv(out / "probability_path.csv", path)
        if a.svg:
            plt = _svg_figure()
            fig, ax = plt.subplots(figsize=(8, 3))
            ax.plot(path["t"], path["prob"], lw=0.8, label=f"Pr(regime {a.regime})")
            if "true_state" in path:
                ax.step(path["t"], (path["true_state"] == int(a.regime)).astype(float), where="mid",
                        lw=0.8, ls="--", label="true regime")
            ax.set_ylim(-0.05, 1.05)
            ax.set_xlabel("t")
            ax.legend(loc="upper right", fontsize="small")
            _save_svg(plt, fig, out / "probability_path.svg")
    if a.samples:
        df = pd.read_csv(a.samples)
        groups = df.groupby("target", sort=True) if "target" in df.columns else [("sample", df)]
        recs = []
        for target, g in groups:
            counts, edges = np.histogram(g["value"].to_numpy(dtype=float), bins=int(a.bins))
            recs.append(pd.DataFrame({"target": target, "bin_left": edges[:-1], "bin_right": edges[1:],
                                      "count": counts}))
            if a.svg:
                plt = _svg_figure()
                fig, ax = plt.subplots(figsize=(4, 3))
                ax.stairs(counts, edges, fill=True, alpha=0.6)
                ax.set_title(str(target))
                _save_svg(plt, fig, out / f"histogram_{target}.svg")
        _write_csv(out / "histograms.csv", pd.concat(recs, ignore_index=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regime-factor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs: bool = False):
        sp.add_argument("--config", help="INI file; options go in the section named after the subcommand")
        sp.add_argument("--seed", type=int)
        if jobs:
            sp.add_argument("--jobs", type=int, help="parallel workers (default: all cores)")
        return sp

    s = common(sub.add_parser("simulate", help="draw a synthetic panel with ground truth"))
    s.add_argument("--out")
    for name, typ in [("N", int), ("T", int), ("dgp", int), ("pattern", int), ("rho", float),
                      ("alpha", float), ("beta", float), ("r2", float), ("q11", float), ("q22", float)]:
        s.add_argument(f"--{name}", type=typ)
    s.add_argument("--labels", help="label file for pattern 1 (one 1-based label per line)")

    f = common(sub.add_parser("fit", help="fit the regime-switching factor model"), jobs=True)
    f.add_argument("panel", nargs="?")
    f.add_argument("--mode", choices=["static", "dynamic"])
    f.add_argument("--regimes", type=int)
    f.add_argument("--factors", help="comma-separated factor counts per regime")
    f.add_argument("--trials", type=int)
    f.add_argument("--tol", type=float)
    f.add_argument("--max-iter", dest="max_iter", type=int)
    f.add_argument("--fix-sigma2", dest="fix_sigma2", type=float, nargs="?", const=1.0,
                   help="hold sigma^2 fixed (default value 1)")
    f.add_argument("--C", type=float, help="sigma^2 is clamped to [1/C^2, C^2]")
    f.add_argument("--estimate-state", dest="estimate_state", action="store_const", const=True,
                   help="re-estimate q or (Q, phi) inside EM")
    f.add_argument("--q11", type=float)
    f.add_argument("--q22", type=float)
    f.add_argument("--standardize", action="store_const", const=True)
    f.add_argument("--out")

    d = common(sub.add_parser("detect", help="turning points from probabilities or a real-time run"))
    d.add_argument("probs", nargs="?")
    d.add_argument("--panel")
    d.add_argument("--realtime", action="store_const", const=True)
    d.add_argument("--regime", type=int, help="1-based regime whose probability is tracked (default 2)")
    d.add_argument("--d", type=int, help="moving-average order")
    d.add_argument("--enter", type=float)
    d.add_argument("--exit", type=float)
    d.add_argument("--initial-phase", dest="initial_phase", type=int, help="1 = outside the regime, 2 = inside")
    d.add_argument("--truth", help="truth_states.csv for lag accounting")
    d.add_argument("--factors")
    d.add_argument("--warmup", type=int)
    d.add_argument("--labels")
    d.add_argument("--stride", type=int)
    d.add_argument("--trials", type=int)
    d.add_argument("--q11", type=float)
    d.add_argument("--q22", type=float)
    d.add_argument("--no-standardize", dest="no_standardize", action="store_const", const=True)
    d.add_argument("--out")

    e = common(sub.add_parser("eval", help="metrics of a fit against simulated truth"))
    e.add_argument("--truth")
    e.add_argument("--fit")
    e.add_argument("--out")

    t = common(sub.add_parser("table1", help="Monte Carlo grid of evaluation metrics"), jobs=True)
    for name in ("patterns", "algorithms", "dgps", "rho", "alpha", "beta", "N", "T"):
        t.add_argument(f"--{name}")
    t.add_argument("--replications", type=int)
    t.add_argument("--trials", type=int)
    t.add_argument("--samples-out", dest="samples_out")
    t.add_argument("--out")

    g = common(sub.add_parser("plotdata", help="plot-ready CSV and SVG output"))
    g.add_argument("--probs")
    g.add_argument("--truth")
    g.add_argument("--regime", type=int)
    g.add_argument("--samples")
    g.add_argument("--bins", type=int)
    g.add_argument("--no-svg", dest="svg", action="store_const", const=False)
    g.add_argument("--out")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "detect": cmd_detect, "eval": cmd_eval,
            "table1": cmd_table1, "plotdata": cmd_plotdata}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    verbose = args.verbose
    del args.verbose
    try:
        return COMMANDS[args.command](args)
    except NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (FitFailureError, NumericalUnderflowError, DegenerateWeightsError, DegenerateFitError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, ParseError, InsufficientSampleError, ZeroVarianceError, OSError,
            KeyError, ValueError) as exc:
        if verbose:
            log.exception("input error")
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
