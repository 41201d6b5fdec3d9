"""EM estimation that ignores regime dynamics.

The E-step computes per-period regime posteriors from the static mixture and
the M-step extracts weighted principal components, alternating loading and
``sigma2`` updates until the pair is self-consistent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import eigh
from scipy.special import logsumexp

from .model import (
    DegenerateWeightsError,
    FitFailureError,
    FitResult,
    InvalidInputError,
    NumericalUnderflowError,
    Panel,
    PanelLike,
    ProbSeries,
    RegimeParams,
    StateModel,
    StaticState,
    as_panel,
    conditional_factor_means,
    log_density_matrix,
)

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-8
MIN_REGIME_WEIGHT = 1e-12


@dataclass(frozen=True)
class EMConfig:
    """Settings shared by the static and Markov EM fits.

    ``sigma2_mode`` is ``"estimate"`` (clamped to ``[1/C^2, C^2]``) or
    ``"fixed"`` (held at ``sigma2_fixed``).  ``estimate_state`` re-estimates
    ``q`` (static) or ``(Q, phi)`` (Markov) inside the EM loop.

    Convergence needs ``|d loglik| / (1 + |loglik|) < tol``; with
    ``param_tol`` set, the last M-step must also have moved every loading
    matrix by less than ``param_tol * (1 + ||L_j||_F)`` and ``sigma2`` by
    less than ``param_tol``.
    """

    n_trials: int = 30
    tol: float = 1e-7
    max_iter: int = 500
    seed: int = 0
    sigma2_mode: str = "estimate"
    sigma2_fixed: float = 1.0
    C: float = 10.0
    estimate_state: bool = False
    inner_tol: float = 1e-8
    inner_max_iter: int = 100
    jobs: int = 1
    init_params: RegimeParams | None = None
    init_probs: np.ndarray | None = None
    param_tol: float | None = None

    def __post_init__(self) -> None:
        if self.sigma2_mode not in ("estimate", "fixed"):
            raise InvalidInputError(f"unknown sigma2_mode {self.sigma2_mode!r}")
        if self.n_trials < 1 or self.max_iter < 1:
            raise InvalidInputError("n_trials and max_iter must be positive")
        if self.C <= 1:
            raise InvalidInputError("C must exceed 1")

    @property
    def sigma2_bounds(self) -> tuple[float, float]:
        return 1.0 / self.C**2, self.C**2


def make_rng(seed_seq: np.random.SeedSequence) -> np.random.Generator:
    """Counter-based generator used everywhere in the package (Philox)."""
    return np.random.Generator(np.random.Philox(seed_seq))


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _posteriors(log_dens: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, float]:
    a = log_dens + np.log(q)
    norm = logsumexp(a, axis=1)
    p = np.exp(a - norm[:, None])
    p /= p.sum(axis=1, keepdims=True)
    return p, float(norm.sum())


def e_step_static(panel: PanelLike, params: RegimeParams, q) -> ProbSeries:
    """Posterior regime probabilities ``q_j L_tj / sum_k q_k L_tk``."""
    q = np.asarray(q, dtype=float).ravel()
    if q.size != params.J:
        raise InvalidInputError("q length must equal the number of regimes")
    p, _ = _posteriors(log_density_matrix(panel, params), q)
    return ProbSeries(p)


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def weighted_covariance(panel: PanelLike, weights) -> np.ndarray:
    """``sum_t w_t x_t x_t' / sum_t w_t``."""
    X = panel.values if hasattr(panel, "values") else np.asarray(panel, dtype=float)
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != X.shape[0]:
        raise InvalidInputError("weights length must equal T")
    if np.any(w < 0):
        raise InvalidInputError("weights must be nonnegative")
    total = w.sum()
    if not total > MIN_REGIME_WEIGHT:
        raise DegenerateWeightsError(f"total regime weight {total:.3g} is numerically zero")
    S = (X * w[:, None]).T @ X / total
    return 0.5 * (S + S.T)


def top_eigenpairs(S: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``r`` eigenvalues (descending) and eigenvectors of symmetric ``S``."""
    n = S.shape[0]
    if r > n:
        raise InvalidInputError(f"cannot extract {r} factors from N={n} series")
    vals, vecs = eigh(S, subset_by_index=[n - r, n - 1])
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def _has_ties(vals: np.ndarray) -> bool:
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    return bool(np.any(np.abs(np.diff(vals)) < 1e-12 * scale))


def m_step_loadings(S_j: np.ndarray, r_j: int, sigma2: float, eig=None) -> np.ndarray:
    """Loadings solving ``S L = L (L'L + sigma2 I)`` for the top ``r_j`` eigenvalues.

    Column ``l`` is the ``l``-th eigenvector scaled to norm
    ``sqrt(max(mu_l - sigma2, EPS_FLOOR))``; its largest-magnitude entry is
    made nonnegative.  ``eig`` may carry precomputed ``top_eigenpairs``.
    """
    S_j = np.asarray(S_j, dtype=float)
    if r_j > S_j.shape[0]:
        raise InvalidInputError(f"r_j={r_j} exceeds N={S_j.shape[0]}")
    vals, vecs = eig if eig is not None else top_eigenpairs(S_j, r_j)
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[idx, np.arange(vecs.shape[1])] < 0, -1.0, 1.0)
    norms = np.sqrt(np.maximum(vals - sigma2, EPS_FLOOR))
    return vecs * (signs * norms)


def sigma2_update(panel: PanelLike, loadings: Sequence[np.ndarray], weights_per_regime,
                  bounds: tuple[float, float] = (0.01, 100.0)) -> float:
    """Trace condition ``(1/N) tr(X'X/T - sum_j q_j L_j L_j')`` with
    ``q_j = mean_t weights[t, j]``, clamped to ``bounds``."""
    X = panel.values if hasattr(panel, "values") else np.asarray(panel, dtype=float)
    W = np.asarray(weights_per_regime, dtype=float)
    T, N = X.shape
    q = W.sum(axis=0) / T
    total = np.sum(X * X) / T - sum(qj * np.sum(lam * lam) for qj, lam in zip(q, loadings))
    return float(np.clip(total / N, *bounds))


def m_step(panel: PanelLike, probs: ProbSeries, dims: Sequence[int], sigma2_mode: str = "estimate",
           *, sigma2: float = 1.0, bounds: tuple[float, float] = (0.01, 100.0),
           inner_tol: float = 1e-8, inner_max_iter: int = 100, stats: dict | None = None) -> RegimeParams:
    """Weighted-PCA M-step.

    In ``"fixed"`` mode ``sigma2`` is held and each regime needs a single
    eigen-solve.  In ``"estimate"`` mode loadings and ``sigma2`` are
    alternated, starting from ``sigma2``, until ``|d sigma2| < inner_tol``.
    """
    panel = as_panel(panel)
    W = probs.marginal
    if W.shape[1] != len(dims):
        raise InvalidInputError("probabilities and dims disagree on J")
    covs = [weighted_covariance(panel, W[:, j]) for j in range(len(dims))]
    eigs = [top_eigenpairs(S, r) for S, r in zip(covs, dims)]
    if stats is not None:
        stats["ties"] = stats.get("ties", 0) + sum(_has_ties(e[0]) for e in eigs)

    if sigma2_mode == "fixed":
        lams = [m_step_loadings(S, r, sigma2, eig=e) for S, r, e in zip(covs, dims, eigs)]
        return RegimeParams(tuple(lams), sigma2)

    s2 = float(np.clip(sigma2, *bounds))
    for it in range(inner_max_iter):
        lams = [m_step_loadings(S, r, s2, eig=e) for S, r, e in zip(covs, dims, eigs)]
        new = sigma2_update(panel, lams, W, bounds)
        done = abs(new - s2) < inner_tol
        s2 = new
        if done:
            break
    if stats is not None:
        stats["inner_iterations"] = it + 1
    lams = [m_step_loadings(S, r, s2, eig=e) for S, r, e in zip(covs, dims, eigs)]
    return RegimeParams(tuple(lams), s2)


def estimate_q(probs: ProbSeries) -> np.ndarray:
    """Mixing weights ``q_j = mean_t p_tj``."""
    return probs.marginal.mean(axis=0)


def estimate_factors(panel: PanelLike, params: RegimeParams, probs: ProbSeries) -> np.ndarray:
    """Probability-weighted conditional factor means, zero-padded to ``max(dims)``."""
    X = as_panel(panel).values
    rmax = max(params.dims)
    F = np.zeros((X.shape[0], rmax))
    for j, fj in enumerate(conditional_factor_means(X, params)):
        F[:, : fj.shape[1]] += probs.marginal[:, [j]] * fj
    return F


estimate_factors_static = estimate_factors


# ---------------------------------------------------------------------------
# EM driver shared with the Markov variant
# ---------------------------------------------------------------------------

EStep = Callable[[RegimeParams, StateModel], "tuple[ProbSeries, float]"]
StateUpdate = Callable[[ProbSeries, StateModel], StateModel]


def random_params(N: int, dims: Sequence[int], sigma2: float, rng: np.random.Generator) -> RegimeParams:
    return RegimeParams(tuple(rng.standard_normal((N, r)) for r in dims), sigma2)


def _param_step(old: RegimeParams, new: RegimeParams) -> float:
    if old.dims != new.dims:
        return np.inf
    moves = [np.linalg.norm(b - a) / (1.0 + np.linalg.norm(b)) for a, b in zip(old.loadings, new.loadings)]
    return max(max(moves), abs(new.sigma2 - old.sigma2))


def run_em(panel, dims, state: StateModel, estep: EStep, config: EMConfig, init: RegimeParams | ProbSeries,
           state_update: StateUpdate | None = None) -> dict:
    """Single EM run from ``init``; returns a trial record (never raises for
    degenerate fits)."""
    s2_start = config.sigma2_fixed if config.sigma2_mode == "fixed" else 1.0
    stats: dict = {}
    mstep_kw = dict(sigma2_mode=config.sigma2_mode, bounds=config.sigma2_bounds,
                    inner_tol=config.inner_tol, inner_max_iter=config.inner_max_iter, stats=stats)
    trace: list[float] = []
    converged = False
    try:
        if isinstance(init, ProbSeries):
            params = m_step(panel, init, dims, sigma2=s2_start, **mstep_kw)
        else:
            params = init
        step = np.inf
        for it in range(config.max_iter + 1):
            probs, ll = estep(params, state)
            trace.append(ll)
            if (len(trace) > 1 and abs(trace[-1] - trace[-2]) / (1.0 + abs(ll)) < config.tol
                    and (config.param_tol is None or step < config.param_tol)):
                converged = True
                break
            if it == config.max_iter:
                break
            new_state = state_update(probs, state) if state_update else state
            new = m_step(panel, probs, dims, sigma2=params.sigma2, **mstep_kw)
            step = _param_step(params, new)
            params, state = new, new_state
    except (DegenerateWeightsError, NumericalUnderflowError, InvalidInputError, np.linalg.LinAlgError) as exc:
        return {"degenerate": True, "error": f"{type(exc).__name__}: {exc}", "trace": trace}
    if not np.isfinite(trace[-1]):
        return {"degenerate": True, "error": "non-finite log-likelihood", "trace": trace}
    return {"degenerate": False, "params": params, "state": state, "probs": probs, "trace": trace,
            "iterations": len(trace) - 1, "converged": converged, "ties": stats.get("ties", 0)}


def run_trials(panel, dims, state: StateModel, estep: EStep, config: EMConfig,
               state_update: StateUpdate | None = None) -> tuple[dict, list[dict]]:
    """Run ``config.n_trials`` restarts; return the winning record and per-trial
    diagnostics.  Trial ``i`` draws from its own spawned Philox stream, so the
    result does not depend on ``config.jobs``."""
    panel = as_panel(panel)
    dims = tuple(int(r) for r in dims)
    if any(r < 1 or r > panel.N for r in dims):
        raise InvalidInputError(f"factor counts {dims} must lie in [1, N={panel.N}]")
    if state.J != len(dims):
        raise InvalidInputError("state model and dims disagree on J")
    s2_start = config.sigma2_fixed if config.sigma2_mode == "fixed" else 1.0
    children = np.random.SeedSequence(config.seed).spawn(config.n_trials)

    def init_for(i: int):
        if i == 0 and config.init_params is not None:
            return config.init_params
        if i == 0 and config.init_probs is not None:
            ip = config.init_probs
            return ip if isinstance(ip, ProbSeries) else ProbSeries(np.asarray(ip, dtype=float))
        return random_params(panel.N, dims, s2_start, make_rng(children[i]))

    def one(i: int) -> dict:
        return run_em(panel, dims, state, estep, config, init_for(i), state_update)

    if config.jobs != 1 and config.n_trials > 1:
        from joblib import Parallel, delayed

        records = Parallel(n_jobs=config.jobs)(delayed(one)(i) for i in range(config.n_trials))
    else:
        records = [one(i) for i in range(config.n_trials)]

    diagnostics = []
    best = None
    for i, rec in enumerate(records):
        rec["trial_index"] = i
        diag = {"trial": i, "degenerate": rec["degenerate"]}
        if rec["degenerate"]:
            diag["error"] = rec["error"]
        else:
            diag.update(loglik=rec["trace"][-1], iterations=rec["iterations"], converged=rec["converged"])
            if best is None or rec["trace"][-1] > best["trace"][-1]:
                best = rec
        diagnostics.append(diag)
    if best is None:
        raise FitFailureError("all EM trials were degenerate", diagnostics)
    return best, diagnostics


def _static_estep(panel):
    def estep(params: RegimeParams, state: StaticState):
        p, ll = _posteriors(log_density_matrix(panel, params), state.q)
        return ProbSeries(p), ll

    return estep


def fit_static(panel: PanelLike, dims: Sequence[int], q=None, config: EMConfig | None = None) -> FitResult:
    """Fit the regime-switching factor model by EM ignoring state dynamics.

    ``q`` defaults to ``1/J``.  The restart with the largest mixture
    log-likelihood wins.
    """
    panel = as_panel(panel)
    config = config or EMConfig()
    J = len(dims)
    state = StaticState(np.full(J, 1.0 / J) if q is None else np.asarray(q, dtype=float))
    update = (lambda probs, st: StaticState(estimate_q(probs))) if config.estimate_state else None
    best, diagnostics = run_trials(panel, dims, state, _static_estep(panel), config, update)
    return _to_result(panel, best, diagnostics, "static")


def _to_result(panel: Panel, best: dict, diagnostics: list[dict], mode: str) -> FitResult:
    params, probs = best["params"], best["probs"]
    return FitResult(
        params=params,
        state=best["state"],
        probs=probs,
        factors=estimate_factors(panel, params, probs),
        loglik_trace=[float(v) for v in best["trace"]],
        iterations=best["iterations"],
        converged=best["converged"],
        trial_index=best["trial_index"],
        mode=mode,
        diagnostics={"trials": diagnostics, "eigen_ties": best["ties"],
                     "factor_padding": "zero-padded to max(dims)"},
    )
