from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ortho_group

from oracles import dense_log_density, dense_log_density_matrix, enumerate_chains, naive_mixture_loglik
from regime_factor.model import (
    DomainError,
    InvalidInputError,
    MarkovState,
    Panel,
    ProbSeries,
    RegimeParams,
    StaticState,
    forward_log,
    full_markov_loglik,
    log_density_matrix,
    mixture_loglik,
    regime_log_density,
)


def test_panel_validation():
    with pytest.raises(InvalidInputError):
        Panel(np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        Panel(np.array([[0.0, np.nan], [1.0, 2.0]]))
    p = Panel(np.ones((4, 3)))
    assert (p.T, p.N) == (4, 3)
    with pytest.raises(ValueError):
        p.values[0, 0] = 5.0


def test_state_validation():
    with pytest.raises(InvalidInputError):
        StaticState(np.array([0.5, 0.6]))
    with pytest.raises(InvalidInputError):
        MarkovState(np.array([[0.9, 0.9], [0.1, 0.1]]).T, np.array([0.5, 0.5]))
    m = MarkovState.two_state(0.95, 0.72)
    np.testing.assert_allclose(m.Q.sum(axis=0), 1.0)
    assert m.Q[0, 1] == pytest.approx(0.28)


def test_standard_normal_at_zero():
    assert regime_log_density([0.0], [[0.0]], 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_diagonal_gaussian():
    val = regime_log_density([0.0, 0.0], [0.0, 0.0], 2.0)
    assert val == pytest.approx(-np.log(2 * np.pi) - np.log(2.0), abs=1e-12)


def test_density_errors():
    with pytest.raises(InvalidInputError):
        regime_log_density([np.inf], [[1.0]], 1.0)
    with pytest.raises(DomainError):
        regime_log_density([0.0], [[1.0]], 0.0)
    with pytest.raises(InvalidInputError):
        regime_log_density([0.0, 1.0], [[1.0]], 1.0)


def test_density_matches_dense_random():
    rng = np.random.default_rng(1)
    x, lam = rng.standard_normal(8), rng.standard_normal((8, 2))
    assert regime_log_density(x, lam, 0.7) == pytest.approx(dense_log_density(x, lam, 0.7), abs=1e-8)


@given(st.integers(1, 20), st.integers(1, 4), st.floats(0.1, 10.0), st.integers(0, 2**32 - 1))
def test_density_orthogonal_invariance(N, r, s2, seed):
    rng = np.random.default_rng(seed)
    r = min(r, N)
    x, lam = rng.standard_normal(N), rng.standard_normal((N, r))
    R = ortho_group.rvs(r, random_state=seed) if r > 1 else np.array([[-1.0]])
    assert regime_log_density(x, lam @ R, s2) == pytest.approx(regime_log_density(x, lam, s2), abs=1e-10)


def _params(rng, N, dims, s2=1.0):
    return RegimeParams(tuple(rng.standard_normal((N, r)) for r in dims), s2)


def test_mixture_single_regime_and_duplicates():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((10, 4))
    lam = rng.standard_normal((4, 2))
    single = mixture_loglik(X, RegimeParams((lam,), 1.3), [1.0])
    direct = sum(regime_log_density(x, lam, 1.3) for x in X)
    assert single == pytest.approx(direct, rel=1e-12)
    dup = mixture_loglik(X, RegimeParams((lam, lam), 1.3), [0.5, 0.5])
    assert dup == pytest.approx(single, rel=1e-12)


def test_mixture_matches_naive_sum():
    rng = np.random.default_rng(3)
    X = 0.3 * rng.standard_normal((6, 3))
    params = _params(rng, 3, (1, 2), 0.8)
    q = np.array([0.3, 0.7])
    logd = dense_log_density_matrix(X, params.loadings, params.sigma2)
    assert mixture_loglik(X, params, q) == pytest.approx(naive_mixture_loglik(logd, q), abs=1e-10)


def test_mixture_permutation_invariance():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((12, 5))
    params = _params(rng, 5, (1, 2, 3))
    q = np.array([0.2, 0.5, 0.3])
    perm = [2, 0, 1]
    permuted = RegimeParams(tuple(params.loadings[p] for p in perm), params.sigma2)
    assert mixture_loglik(X, permuted, q[perm]) == pytest.approx(mixture_loglik(X, params, q), rel=1e-12)
    with pytest.raises(InvalidInputError):
        mixture_loglik(X, params, [0.5, 0.5])


def test_markov_loglik_single_regime():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((7, 3))
    params = _params(rng, 3, (2,))
    ll = full_markov_loglik(X, params, MarkovState(np.ones((1, 1)), np.ones(1)))
    assert ll == pytest.approx(log_density_matrix(X, params).sum(), rel=1e-12)


def test_frozen_chain_via_forward_recursion():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((6, 3))
    logd = log_density_matrix(X, _params(rng, 3, (1, 1)))
    filt, _, cond = forward_log(logd, np.eye(2), np.array([1.0, 0.0]))
    np.testing.assert_allclose(filt, np.tile([1.0, 0.0], (6, 1)))
    assert cond.sum() == pytest.approx(logd[:, 0].sum(), rel=1e-12)


def test_markov_loglik_matches_enumeration():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((6, 3))
    params = _params(rng, 3, (1, 2))
    markov = MarkovState(np.array([[0.8, 0.3], [0.2, 0.7]]), np.array([0.4, 0.6]))
    logd = dense_log_density_matrix(X, params.loadings, params.sigma2)
    ref, *_ = enumerate_chains(logd, markov.Q, markov.phi)
    assert full_markov_loglik(X, params, markov) == pytest.approx(ref, abs=1e-10)


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_iid_columns_reduce_to_mixture(T, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T, 3))
    params = _params(rng, 3, (1, 1))
    q = rng.uniform(0.1, 1.0, 2)
    q /= q.sum()
    phi = rng.uniform(0.1, 1.0, 2)
    phi /= phi.sum()
    markov = MarkovState(np.column_stack([q, q]), phi)
    logd = log_density_matrix(X, params)
    correction = np.log(np.exp(logd[0]) @ phi) - np.log(np.exp(logd[0]) @ q)
    assert full_markov_loglik(X, params, markov) == pytest.approx(mixture_loglik(X, params, q) + correction, abs=1e-9)
    ref, *_ = enumerate_chains(logd, markov.Q, markov.phi)
    assert full_markov_loglik(X, params, markov) == pytest.approx(ref, abs=1e-9)


def test_probseries_checks():
    ProbSeries(np.array([[0.5, 0.5], [1.0, 0.0]]), np.array([[[0.5, 0.5], [0.0, 0.0]]])).check()
    with pytest.raises(InvalidInputError):
        ProbSeries(np.ones((3, 2)) / 2, np.ones((3, 2, 2)))
    with pytest.raises(AssertionError):
        ProbSeries(np.array([[0.6, 0.6]])).check()
