"""Ground-truth evaluation of fitted regime-switching factor models.

Fitted regimes carry arbitrary labels, so every metric first matches them
to the true regimes by maximising the overlap ``sum_t p_{t, pi(j)} 1{z_t = j}``
over permutations ``pi``.

R-squared values are uncentered projection R-squared:
``1 - ||M_X Y||_F^2 / ||Y||_F^2`` where ``M_X`` projects off the column
space of the regressors ``X``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .em_dynamic import estimate_transition, fit_dynamic
from .em_static import EMConfig, fit_static
from .model import FitResult, InvalidInputError, MarkovState, ProbSeries, StaticState
from .simulate import SimConfig, SimTruth, simulate_panel

log = logging.getLogger(__name__)


class DegenerateFitError(RuntimeError):
    pass


class InsufficientSampleError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Label alignment
# ---------------------------------------------------------------------------


def match_regimes(states: np.ndarray, marginal: np.ndarray) -> tuple[int, ...]:
    """Permutation ``perm`` with ``perm[j]`` = fitted regime matched to true regime ``j``."""
    states = np.asarray(states, dtype=int)
    J = marginal.shape[1]
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(J)):
        score = sum(marginal[states == j, perm[j]].sum() for j in range(J))
        if score > best_score + 1e-12:
            best, best_score = perm, score
    return tuple(best)


def permute_probs(probs: ProbSeries, perm: Sequence[int]) -> ProbSeries:
    perm = list(perm)
    pw = None if probs.pairwise is None else probs.pairwise[:, perm][:, :, perm]
    return ProbSeries(probs.marginal[:, perm], pw)


def align_fit(fit: FitResult, perm: Sequence[int]) -> FitResult:
    """Reorder a fit's regimes so fitted regime ``perm[j]`` becomes ``j``."""
    perm = list(perm)
    params = replace(fit.params, loadings=tuple(fit.params.loadings[p] for p in perm))
    state = fit.state
    if isinstance(state, MarkovState):
        state = MarkovState(state.Q[np.ix_(perm, perm)], state.phi[perm])
    elif isinstance(state, StaticState):
        state = StaticState(state.q[perm])
    return replace(fit, params=params, state=state, probs=permute_probs(fit.probs, perm))


def aligned(truth: SimTruth, fit: FitResult) -> FitResult:
    return align_fit(fit, match_regimes(truth.states, fit.probs.marginal))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def projection_r2(Y: np.ndarray, X: np.ndarray) -> float:
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    total = float(np.sum(Y * Y))
    if total == 0:
        return 0.0
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    return float(np.clip(1.0 - np.sum(resid * resid) / total, 0.0, 1.0))


@dataclass(frozen=True)
class RotationSet:
    W: list[np.ndarray]
    H: list[np.ndarray]


def compute_rotations(truth: SimTruth, fit: FitResult) -> RotationSet:
    """Regime rotations ``H_j = (T^-1 sum_t f f' 1{z_t=j}) (L0_j' L_j / N) W_j^-1``
    with ``W_j = (L_j'L_j/N + sigma2/N I)(T^-1 sum_t p_tj)``."""
    fit = aligned(truth, fit)
    F0, z = truth.factors, truth.states
    T = F0.shape[0]
    N = fit.params.N
    Ws, Hs = [], []
    for j, (lam0, lam) in enumerate(zip(truth.loadings, fit.params.loadings)):
        r = lam.shape[1]
        W = (lam.T @ lam / N + fit.params.sigma2 / N * np.eye(r)) * fit.probs.marginal[:, j].mean()
        if np.min(np.linalg.eigvalsh(0.5 * (W + W.T))) <= 1e-10:
            raise DegenerateFitError(f"W for regime {j + 1} is singular")
        Fj = F0[z == j]
        sigma_f = Fj.T @ Fj / T
        Hs.append(sigma_f @ (lam0.T @ lam / N) @ np.linalg.inv(W))
        Ws.append(W)
    return RotationSet(Ws, Hs)


def r2_loading_space(truth: SimTruth, fit: FitResult, j: int) -> float:
    """R-squared of fitted loadings of regime ``j`` (0-based) projected on the true ones."""
    fit = aligned(truth, fit)
    lam0 = truth.loadings[j]
    if np.linalg.matrix_rank(lam0) < lam0.shape[1]:
        raise InvalidInputError("true loadings are rank deficient")
    return projection_r2(fit.params.loadings[j], lam0)


def rotated_true_factors(truth: SimTruth, rot: RotationSet) -> np.ndarray:
    """``H_{z_t}^{-1} f_t^0`` for every ``t``."""
    F0, z = truth.factors, truth.states
    G = np.zeros((F0.shape[0], max(h.shape[1] for h in rot.H)))
    for j, H in enumerate(rot.H):
        mask = z == j
        G[mask, : H.shape[1]] = np.linalg.solve(H, F0[mask].T).T
    return G


def r2_factors(truth: SimTruth, fit: FitResult, rotated: bool) -> float:
    """Pooled R-squared of fitted factors on true factors, optionally after the
    regime-specific rotation."""
    if not rotated:
        return projection_r2(fit.factors, truth.factors)
    return projection_r2(fit.factors, rotated_true_factors(truth, compute_rotations(truth, fit)))


def hysteresis_labels(p: np.ndarray, enter: float, exit_: float, initial: int = 0) -> np.ndarray:
    labels = np.empty(p.size, dtype=int)
    cur = initial
    for t, v in enumerate(p):
        if cur == 0 and v > enter:
            cur = 1
        elif cur == 1 and v < exit_:
            cur = 0
        labels[t] = cur
    return labels


def _spans(mask: np.ndarray) -> list[tuple[int, int]]:
    out, start = [], None
    for t, m in enumerate(mask):
        if m and start is None:
            start = t
        elif not m and start is not None:
            out.append((start, t - 1))
            start = None
    if start is not None:
        out.append((start, mask.size - 1))
    return out


def classification_report(truth: SimTruth, probs, threshold_pair: tuple[float, float] = (0.9, 0.1),
                          regime: int = 1, align: bool = True) -> dict:
    """Errors ``|p_tj - 1{z_t=j}|`` (mean and sup over ``t`` and ``j``) and
    spans misclassified by the hysteresis rule applied to ``regime``.
    ``align=False`` skips regime matching."""
    if isinstance(probs, FitResult):
        probs = probs.probs
    z = np.asarray(truth.states, dtype=int)
    if align:
        probs = permute_probs(probs, match_regimes(z, probs.marginal))
    ind = np.eye(probs.J)[z]
    err = np.abs(probs.marginal - ind)
    enter, exit_ = threshold_pair
    labels = hysteresis_labels(probs.marginal[:, regime], enter, exit_)
    wrong = labels != (z == regime).astype(int)
    return {
        "mean_abs_error": float(err.mean()),
        "sup_abs_error": float(err.max()),
        "false_positive_spans": _spans(wrong),
        "per_t_labels": labels,
    }


def transition_errors(truth: SimTruth, fit: FitResult) -> tuple[float, float]:
    """``(|Q11 - Q11_0|, |Q22 - Q22_0|)`` for the smoothed-probability estimate."""
    cfg = truth.config
    fit = aligned(truth, fit)
    Q, _ = estimate_transition(fit.probs)
    return abs(Q[0, 0] - cfg.q11), abs(Q[1, 1] - cfg.q22)


def estimation_error(truth: SimTruth, fit: FitResult, target: str, regime: int = 0) -> np.ndarray:
    """Rotation-aligned estimation error at ``i = N/2`` (loading of ``regime``)
    or ``t = T/2`` (factor)."""
    fit = aligned(truth, fit)
    rot = compute_rotations(truth, fit)
    if target == "loading":
        i = truth.panel.N // 2 - 1
        return fit.params.loadings[regime][i] - rot.H[regime].T @ truth.loadings[regime][i]
    if target == "factor":
        t = truth.panel.T // 2 - 1
        j = int(truth.states[t])
        r = rot.H[j].shape[1]
        return fit.factors[t, :r] - np.linalg.solve(rot.H[j], truth.factors[t])
    raise InvalidInputError(f"unknown target {target!r}")


def standardize_sample(errors: np.ndarray, min_reps: int = 30) -> np.ndarray:
    errors = np.asarray(errors, dtype=float)
    if errors.ndim == 1:
        errors = errors[:, None]
    if errors.shape[0] < min_reps:
        raise InsufficientSampleError(f"need at least {min_reps} replications, got {errors.shape[0]}")
    sd = errors.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        raise ZeroVarianceError("estimation errors have zero variance")
    return (errors - errors.mean(axis=0)) / sd


def standardized_estimates(replication_fits: Sequence[FitResult], truth_list: Sequence[SimTruth],
                           target: str, regime: int = 0, min_reps: int = 30) -> np.ndarray:
    """Cross-replication standardised estimation errors (``R x r``)."""
    if len(replication_fits) != len(truth_list):
        raise InvalidInputError("need one truth per fit")
    if len(replication_fits) < min_reps:
        raise InsufficientSampleError(f"need at least {min_reps} replications, got {len(replication_fits)}")
    errs = np.array([estimation_error(tr, f, target, regime) for f, tr in zip(replication_fits, truth_list)])
    return standardize_sample(errs, min_reps)


def shape_summary(sample: np.ndarray) -> dict:
    s = np.asarray(sample, dtype=float).ravel()
    return {"mean": float(s.mean()), "std": float(s.std(ddof=1)),
            "skewness": float(stats.skew(s)), "excess_kurtosis": float(stats.kurtosis(s))}


# ---------------------------------------------------------------------------
# Monte Carlo grid
# ---------------------------------------------------------------------------

SIM_MARKOV = (0.95, 0.72)


@dataclass(frozen=True)
class Cell:
    """One simulation-design cell."""

    pattern: int = 2
    algorithm: str = "smoothed"
    dgp: int = 1
    rho: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    N: int = 100
    T: int = 300

    def sim_config(self, seed: int) -> SimConfig:
        return SimConfig(N=self.N, T=self.T, dgp=self.dgp, rho=self.rho, alpha=self.alpha,
                         beta=self.beta, pattern=self.pattern, seed=seed)


def replication_seed(base_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([base_seed, rep]).generate_state(1)[0])


def fit_replication(truth: SimTruth, algorithm: str, trials: int, seed: int) -> FitResult:
    """Fit with the simulation settings: ``sigma2 = 1`` fixed, ``q = 1/2`` or
    the Markov chain ``Q11 = 0.95, Q22 = 0.72, phi = 1/2``."""
    dims = tuple(l.shape[1] for l in truth.loadings)
    cfg = EMConfig(n_trials=trials, sigma2_mode="fixed", sigma2_fixed=1.0, seed=seed)
    if algorithm == "smoothed":
        return fit_dynamic(truth.panel, dims, MarkovState.two_state(*SIM_MARKOV), cfg)
    if algorithm == "unsmoothed":
        return fit_static(truth.panel, dims, None, cfg)
    raise InvalidInputError(f"unknown algorithm {algorithm!r}")


def replication_metrics(truth: SimTruth, fit: FitResult) -> dict:
    fit = aligned(truth, fit)
    out = {
        "R2_l1": r2_loading_space(truth, fit, 0),
        "R2_l2": r2_loading_space(truth, fit, 1),
        "R2_f": r2_factors(truth, fit, rotated=False),
        "R2_Hf": r2_factors(truth, fit, rotated=True),
        "class_error": classification_report(truth, fit.probs)["mean_abs_error"],
        "loglik": fit.loglik,
    }
    rot = compute_rotations(truth, fit)
    out["loading_residual"] = float(np.mean([
        np.linalg.norm(lam - lam0 @ H) / np.sqrt(truth.panel.N)
        for lam, lam0, H in zip(fit.params.loadings, truth.loadings, rot.H)]))
    if fit.probs.pairwise is not None:
        out["Q11_err"], out["Q22_err"] = transition_errors(truth, fit)
    out["err_loading"] = estimation_error(truth, fit, "loading")
    out["err_factor"] = estimation_error(truth, fit, "factor")
    return out


def run_replication(cell: Cell, rep: int, trials: int, base_seed: int = 0, keep: bool = False) -> dict:
    seed = replication_seed(base_seed, rep)
    truth = simulate_panel(cell.sim_config(seed))
    fit = fit_replication(truth, cell.algorithm, trials, seed)
    out = replication_metrics(truth, fit)
    out["rep"] = rep
    if keep:
        out["truth"], out["fit"] = truth, fit
    return out


def run_cell(cell: Cell, replications: int, trials: int, base_seed: int = 0, jobs: int = 1,
             keep: bool = False) -> list[dict]:
    """All replications of one cell, ordered by replication index."""
    if jobs == 1:
        return [run_replication(cell, r, trials, base_seed, keep) for r in range(replications)]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(run_replication)(cell, r, trials, base_seed, keep)
                                 for r in range(replications))


TABLE1_COLUMNS = ["pattern", "algorithm", "dgp", "rho", "alpha", "beta", "N", "T", "replications",
                  "R2_l1", "R2_l2", "R2_f", "R2_Hf", "Q11_err", "Q22_err"]


def table1_run(cells: Iterable[Cell], replications: int, trials: int, base_seed: int = 0,
               jobs: int = 1, samples: dict | None = None) -> list[dict]:
    """Average metrics per cell.  Transition errors are reported only for
    smoothed fits of patterns 1 and 4 (``None`` elsewhere).

    When ``samples`` is a dict and there are at least 30 replications, it
    receives the standardised loading (``i = N/2``) and factor (``t = T/2``)
    errors of each cell, keyed by cell.
    """
    rows = []
    for cell in cells:
        reps = run_cell(cell, replications, trials, base_seed, jobs)
        if samples is not None and replications >= 30:
            samples[cell] = {
                "loading": standardize_sample(np.array([r["err_loading"] for r in reps])),
                "factor": standardize_sample(np.array([r["err_factor"] for r in reps])),
            }
        row = {"pattern": cell.pattern, "algorithm": cell.algorithm, "dgp": cell.dgp, "rho": cell.rho,
               "alpha": cell.alpha, "beta": cell.beta, "N": cell.N, "T": cell.T, "replications": replications}
        for key in ("R2_l1", "R2_l2", "R2_f", "R2_Hf"):
            row[key] = float(np.mean([r[key] for r in reps]))
        report_q = cell.algorithm == "smoothed" and cell.pattern in (1, 4)
        for key in ("Q11_err", "Q22_err"):
            row[key] = float(np.mean([r[key] for r in reps])) if report_q else None
        rows.append(row)
    return rows
