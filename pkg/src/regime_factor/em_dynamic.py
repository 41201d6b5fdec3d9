"""EM estimation with Markov regime dynamics.

The E-step runs a normalised forward filter followed by the backward
smoothing identity

    p_{t|T}[k] = p_{t|t}[k] * Q[:, k]' (p_{t+1|T} / p_{t+1|t}),

which costs ``O(T J^2)``.  :func:`pairwise_smoother_reference` keeps the
slower forward-only recursion (one augmented filter pass per ``(t, j, k)``)
as an independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .em_static import EMConfig, _to_result, estimate_factors, run_trials
from .model import (
    DegenerateWeightsError,
    FitResult,
    InvalidInputError,
    MarkovState,
    NumericalUnderflowError,
    PanelLike,
    ProbSeries,
    RegimeParams,
    as_panel,
    forward_log,
    log_density_matrix,
    regime_log_densities,
)

DIVISION_GUARD = 1e-300


@dataclass(frozen=True)
class FilterOutput:
    """Forward-filter quantities.

    ``predicted[0]`` is ``phi`` and ``predicted[t] = Q @ filtered[t-1]``;
    ``cond_loglik[t] = log L(x_t | x_{1:t-1})``.  ``pairwise_filtered[t-1, j, k]``
    is ``Pr(z_t=j, z_{t-1}=k | x_{1:t})`` when requested.
    """

    filtered: np.ndarray
    predicted: np.ndarray
    cond_loglik: np.ndarray
    log_density: np.ndarray
    pairwise_filtered: np.ndarray | None = None

    @property
    def loglik(self) -> float:
        return float(np.sum(self.cond_loglik))


def _filter_from_log_density(logd: np.ndarray, markov: MarkovState, pairwise: bool) -> FilterOutput:
    filtered, predicted, cond = forward_log(logd, markov.Q, markov.phi)
    pw = None
    if pairwise and logd.shape[0] > 1:
        lik = np.exp(logd[1:] - cond[1:, None])
        pw = lik[:, :, None] * markov.Q[None, :, :] * filtered[:-1, None, :]
    return FilterOutput(filtered, predicted, cond, logd, pw)


def hamilton_filter(panel: PanelLike, params: RegimeParams, markov: MarkovState,
                    pairwise: bool = False) -> FilterOutput:
    """Filtered regime probabilities ``Pr(z_t = j | x_{1:t})``."""
    if not isinstance(markov, MarkovState):
        raise InvalidInputError("hamilton_filter requires a MarkovState")
    if markov.J != params.J:
        raise InvalidInputError("state model and params disagree on J")
    return _filter_from_log_density(log_density_matrix(panel, params), markov, pairwise)


def filter_step(prev_filtered: np.ndarray, x: np.ndarray, params: RegimeParams,
                markov: MarkovState) -> np.ndarray:
    """One filter update: ``Pr(z_s | x_{1:s})`` from ``Pr(z_{s-1} | x_{1:s-1})``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    logd = np.array([regime_log_densities(x, lam, params.sigma2)[0] for lam in params.loadings])
    pred = markov.Q @ np.asarray(prev_filtered, dtype=float)
    with np.errstate(divide="ignore"):
        a = logd + np.log(pred)
    a -= a.max()
    p = np.exp(a)
    return p / p.sum()


def smoother(filter_out: FilterOutput, markov: MarkovState) -> ProbSeries:
    """Smoothed marginal and pairwise probabilities given the whole sample."""
    filt, pred = filter_out.filtered, filter_out.predicted
    T, J = filt.shape
    Q = markov.Q
    sm = np.empty((T, J))
    sm[-1] = filt[-1]
    ratios = np.empty((T, J))
    ratios[0] = np.nan
    bad = np.nonzero(np.any(pred[1:] < DIVISION_GUARD, axis=1))[0]
    if bad.size:
        t = int(bad[-1]) + 1
        raise NumericalUnderflowError(f"predicted probability underflow at t={t}", t=t)
    for t in range(T - 1, 0, -1):
        ratios[t] = sm[t] / pred[t]
        s = filt[t - 1] * (Q.T @ ratios[t])
        sm[t - 1] = s / s.sum()
    if T == 1:
        return ProbSeries(sm, np.zeros((0, J, J)))
    pairwise = ratios[1:, :, None] * Q[None, :, :] * filt[:-1, None, :]
    return ProbSeries(sm, pairwise)


def pairwise_smoother_reference(filter_out: FilterOutput, markov: MarkovState) -> ProbSeries:
    """Forward-only smoother: for each ``(t, j, k)`` carry the joint
    ``Pr(z_tau, z_t=j, z_{t-1}=k | x_{1:tau})`` forward to ``tau = T`` and
    marginalise.  ``O(T^2 J^3)``; intended for small ``T`` checks."""
    logd, cond, filt = filter_out.log_density, filter_out.cond_loglik, filter_out.filtered
    Q = markov.Q
    T, J = filt.shape
    lik = np.exp(logd - cond[:, None])
    pairwise = np.zeros((max(T - 1, 0), J, J))
    for t in range(1, T):
        for j in range(J):
            for k in range(J):
                vec = np.zeros(J)
                vec[j] = lik[t, j] * Q[j, k] * filt[t - 1, k]
                for tau in range(t + 1, T):
                    vec = lik[tau] * (Q @ vec)
                pairwise[t - 1, j, k] = vec.sum()
    if T == 1:
        return ProbSeries(filt.copy(), pairwise)
    marginal = np.vstack([pairwise[0].sum(axis=0), pairwise.sum(axis=2)])
    return ProbSeries(marginal, pairwise)


def estimate_transition(probs: ProbSeries) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix from smoothed pairwise probabilities (columns sum to
    one) and the initial distribution ``phi = p_{1|T}``."""
    if probs.pairwise is None:
        raise InvalidInputError("pairwise probabilities are required")
    counts = probs.pairwise.sum(axis=0)
    mass = counts.sum(axis=0)
    if np.any(mass < 1e-12):
        raise DegenerateWeightsError("a regime has no transition mass")
    return counts / mass[None, :], probs.marginal[0].copy()


estimate_factors_dynamic = estimate_factors


def _markov_estep(panel):
    def estep(params: RegimeParams, state: MarkovState):
        fo = hamilton_filter(panel, params, state)
        return smoother(fo, state), fo.loglik

    return estep


def _transition_update(probs: ProbSeries, state: MarkovState) -> MarkovState:
    Q, phi = estimate_transition(probs)
    return MarkovState(Q, phi)


def fit_dynamic(panel: PanelLike, dims: Sequence[int], markov: MarkovState | None = None,
                config: EMConfig | None = None) -> FitResult:
    """Fit by EM with smoothed regime probabilities.

    ``markov`` defaults to uniform ``Q`` and ``phi``; it is held fixed unless
    ``config.estimate_state`` is set.
    """
    panel = as_panel(panel)
    config = config or EMConfig()
    markov = markov or MarkovState.uniform(len(dims))
    update = _transition_update if config.estimate_state else None
    best, diagnostics = run_trials(panel, dims, markov, _markov_estep(panel), config, update)
    return _to_result(panel, best, diagnostics, "dynamic")
