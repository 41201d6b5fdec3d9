"""Domain types and Gaussian regime densities for regime-switching factor models.

Every regime j has covariance ``Lambda_j Lambda_j' + sigma2 * I_N``.  Densities
are evaluated in the reduced ``r_j``-dimensional form through the Woodbury
identity, so no ``N x N`` matrix is ever built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


class InvalidInputError(ValueError):
    """Raised for malformed or non-finite inputs."""


class DomainError(ValueError):
    """Raised when a parameter lies outside its admissible domain."""


class DegenerateWeightsError(RuntimeError):
    """A regime received (numerically) zero total weight."""


class NumericalUnderflowError(RuntimeError):
    """A normalizer or divisor underflowed in the filter/smoother."""

    def __init__(self, message: str, t: int | None = None):
        super().__init__(message)
        self.t = t


class FitFailureError(RuntimeError):
    """Every EM restart was degenerate or diverged."""

    def __init__(self, message: str, diagnostics: list[dict] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Panel:
    """A ``T x N`` panel of observations, time-major."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2:
            raise InvalidInputError(f"panel must be 2-D, got shape {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 1:
            raise InvalidInputError(f"panel needs T >= 2 and N >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("panel contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]


PanelLike = Union[Panel, np.ndarray]


def as_panel(panel: PanelLike) -> Panel:
    return panel if isinstance(panel, Panel) else Panel(np.asarray(panel, dtype=float))


def _as_loading(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    return lam[:, None] if lam.ndim == 1 else lam


@dataclass(frozen=True)
class RegimeParams:
    """Per-regime loadings plus the shared idiosyncratic variance."""

    loadings: tuple[np.ndarray, ...]
    sigma2: float

    def __post_init__(self) -> None:
        lams = tuple(_as_loading(l) for l in self.loadings)
        if not lams:
            raise InvalidInputError("at least one regime is required")
        n = lams[0].shape[0]
        for lam in lams:
            if lam.shape[0] != n:
                raise InvalidInputError("all loading matrices must have N rows")
            if not np.all(np.isfinite(lam)):
                raise InvalidInputError("loadings contain non-finite entries")
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            raise DomainError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "loadings", lams)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def J(self) -> int:
        return len(self.loadings)

    @property
    def N(self) -> int:
        return self.loadings[0].shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(lam.shape[1] for lam in self.loadings)


def _check_prob_vector(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float).ravel()
    if not np.all(np.isfinite(p)) or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-10:
        raise InvalidInputError(f"{name} must be strictly positive and sum to 1")
    return p


@dataclass(frozen=True)
class StaticState:
    """Static mixing weights ``q``."""

    q: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", _check_prob_vector(self.q, "q"))

    @property
    def J(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class MarkovState:
    """Markov regime dynamics.

    ``Q[j, k]`` is the probability of moving from state ``k`` to state ``j``,
    so each column sums to one.  ``phi`` is the distribution of ``z_1``.
    """

    Q: np.ndarray
    phi: np.ndarray

    def __post_init__(self) -> None:
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        J = Q.shape[0]
        if Q.shape != (J, J):
            raise InvalidInputError(f"Q must be square, got {Q.shape}")
        if not np.all(np.isfinite(Q)) or np.any(Q <= 0):
            raise InvalidInputError("Q entries must be finite and strictly positive")
        if np.max(np.abs(Q.sum(axis=0) - 1.0)) > 1e-10:
            raise InvalidInputError("columns of Q must sum to 1")
        phi = _check_prob_vector(self.phi, "phi")
        if phi.size != J:
            raise InvalidInputError("phi length must match Q")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "phi", phi)

    @property
    def J(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def uniform(cls, J: int) -> "MarkovState":
        return cls(np.full((J, J), 1.0 / J), np.full(J, 1.0 / J))

    @classmethod
    def two_state(cls, q11: float, q22: float, phi: Sequence[float] = (0.5, 0.5)) -> "MarkovState":
        Q = np.array([[q11, 1.0 - q22], [1.0 - q11, q22]])
        return cls(Q, np.asarray(phi, dtype=float))


StateModel = Union[StaticState, MarkovState]


@dataclass(frozen=True)
class ProbSeries:
    """Regime probabilities: ``marginal`` is ``T x J``; ``pairwise[t-1, j, k]``
    holds ``Pr(z_t = j, z_{t-1} = k | data)`` for ``t = 2..T``."""

    marginal: np.ndarray
    pairwise: np.ndarray | None = None

    def __post_init__(self) -> None:
        m = np.atleast_2d(np.asarray(self.marginal, dtype=float))
        if m.ndim != 2:
            raise InvalidInputError("marginal must be T x J")
        object.__setattr__(self, "marginal", m)
        if self.pairwise is not None:
            pw = np.asarray(self.pairwise, dtype=float)
            if pw.shape != (m.shape[0] - 1, m.shape[1], m.shape[1]):
                raise InvalidInputError(f"pairwise shape {pw.shape} inconsistent with marginal {m.shape}")
            object.__setattr__(self, "pairwise", pw)

    @property
    def T(self) -> int:
        return self.marginal.shape[0]

    @property
    def J(self) -> int:
        return self.marginal.shape[1]

    def check(self, atol: float = 1e-10) -> None:
        """Raise ``AssertionError`` if the stochasticity invariants fail."""
        m = self.marginal
        assert np.all(m >= -atol) and np.all(m <= 1 + atol), "probabilities outside [0, 1]"
        assert np.max(np.abs(m.sum(axis=1) - 1.0)) <= atol, "rows do not sum to one"
        if self.pairwise is not None:
            assert np.max(np.abs(self.pairwise.sum(axis=2) - m[1:])) <= atol, "pairwise inconsistent"


@dataclass
class FitResult:
    """Outcome of an EM fit (static or Markov).

    ``factors`` is ``T x max(dims)``; for rows whose most likely regime has
    fewer factors the trailing columns hold only the (small) contribution of
    the other regimes and are zero when the regime is certain.
    """

    params: RegimeParams
    state: StateModel
    probs: ProbSeries
    factors: np.ndarray
    loglik_trace: list[float]
    iterations: int
    converged: bool
    trial_index: int
    mode: str = "static"
    diagnostics: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.params.dims


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def _check_sigma2(sigma2: float) -> float:
    if not np.isfinite(sigma2):
        raise InvalidInputError("sigma2 must be finite")
    if sigma2 <= 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    return float(sigma2)


def regime_log_densities(X: np.ndarray, lam: np.ndarray, sigma2: float) -> np.ndarray:
    """Vectorised ``log L(x_t | z_t = j)`` for every row of ``X`` (``T x N``)."""
    X = np.atleast_2d(X)
    lam = np.atleast_2d(lam)
    n = X.shape[1]
    r = lam.shape[1]
    sq = np.einsum("ti,ti->t", X, X)
    M = sigma2 * np.eye(r) + lam.T @ lam
    chol = np.linalg.cholesky(M)
    # log|I_r + L'L / s2| = log|M| - r log s2
    logdet = n * np.log(sigma2) + 2.0 * np.sum(np.log(np.diag(chol))) - r * np.log(sigma2)
    z = solve_triangular(chol, (X @ lam).T, lower=True)
    quad = (sq - np.einsum("rt,rt->t", z, z)) / sigma2
    return -0.5 * (n * LOG_2PI + logdet + quad)


def regime_log_density(x: np.ndarray, lam: np.ndarray, sigma2: float) -> float:
    """Log density of ``N(0, lam lam' + sigma2 I)`` at ``x``."""
    x = np.asarray(x, dtype=float).ravel()
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 1:
        lam = lam[:, None]
    if lam.shape[0] != x.size:
        raise InvalidInputError(f"loadings have {lam.shape[0]} rows, x has length {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
        raise InvalidInputError("non-finite input")
    sigma2 = _check_sigma2(sigma2)
    return float(regime_log_densities(x[None, :], lam, sigma2)[0])


def log_density_matrix(panel: PanelLike, params: RegimeParams) -> np.ndarray:
    """``T x J`` matrix of regime log densities."""
    X = as_panel(panel).values
    if X.shape[1] != params.N:
        raise InvalidInputError(f"panel has N={X.shape[1]}, loadings have N={params.N}")
    return np.column_stack([regime_log_densities(X, lam, params.sigma2) for lam in params.loadings])


def mixture_loglik(panel: PanelLike, params: RegimeParams, q: np.ndarray) -> float:
    """Static mixture log-likelihood ``sum_t log sum_j q_j L_tj``."""
    q = np.asarray(q, dtype=float).ravel()
    if q.size != params.J:
        raise InvalidInputError(f"q has length {q.size}, expected {params.J}")
    logd = log_density_matrix(panel, params)
    return float(np.sum(logsumexp(logd + np.log(q), axis=1)))


def forward_log(log_dens: np.ndarray, Q: np.ndarray, phi: np.ndarray):
    """Normalised forward recursion.

    Returns ``(filtered, predicted, cond_loglik)`` where ``predicted[0] = phi``
    and ``predicted[t] = Q @ filtered[t-1]``.
    """
    T, J = log_dens.shape
    shift = log_dens.max(axis=1)
    if not np.all(np.isfinite(shift)):
        t = int(np.argmin(np.isfinite(shift)))
        raise NumericalUnderflowError(f"zero normalizer in filter at t={t}", t=t)
    lik = np.exp(log_dens - shift[:, None])
    filtered = np.empty((T, J))
    predicted = np.empty((T, J))
    norms = np.empty(T)
    pred = np.asarray(phi, dtype=float)
    for t in range(T):
        predicted[t] = pred
        a = lik[t] * pred
        c = a.sum()
        if not c > 0:
            raise NumericalUnderflowError(f"zero normalizer in filter at t={t}", t=t)
        norms[t] = c
        f = a / c
        filtered[t] = f
        pred = Q @ f
    return filtered, predicted, shift + np.log(norms)


def full_markov_loglik(panel: PanelLike, params: RegimeParams, markov: MarkovState) -> float:
    """Exact log-likelihood of the Markov-switching model (sum of one-step
    conditional log-likelihoods)."""
    if not isinstance(markov, MarkovState):
        raise InvalidInputError("full_markov_loglik requires a MarkovState")
    if markov.J != params.J:
        raise InvalidInputError("state model and params disagree on J")
    _, _, cond = forward_log(log_density_matrix(panel, params), markov.Q, markov.phi)
    return float(np.sum(cond))


def conditional_factor_means(X: np.ndarray, params: RegimeParams) -> list[np.ndarray]:
    """``E(f_t | x_t, z_t = j)`` for each regime, each ``T x r_j``."""
    out = []
    for lam in params.loadings:
        M = params.sigma2 * np.eye(lam.shape[1]) + lam.T @ lam
        out.append(cho_solve(cho_factor(M), lam.T @ X.T).T)
    return out
