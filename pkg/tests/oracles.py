"""Independent brute-force reference computations used by the tests."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp


def dense_log_density(x, lam, sigma2):
    """Gaussian log-density with the full N x N covariance formed explicitly."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float).reshape(x.size, -1)
    cov = lam @ lam.T + sigma2 * np.eye(x.size)
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    quad = x @ np.linalg.inv(cov) @ x
    return -0.5 * (x.size * np.log(2 * np.pi) + logdet + quad)


def dense_log_density_matrix(X, loadings, sigma2):
    return np.array([[dense_log_density(x, lam, sigma2) for lam in loadings] for x in X])


def enumerate_chains(logd, Q, phi):
    """Exact posterior quantities by summing over all ``J^T`` state paths.

    Returns (loglik, smoothed marginal T x J, pairwise (T-1) x J x J with
    ``[t-1, j, k] = Pr(z_t=j, z_{t-1}=k | x)``, filtered T x J).
    """
    T, J = logd.shape
    logQ, logphi = np.log(Q), np.log(phi)
    paths = list(itertools.product(range(J), repeat=T))
    # joint log weights of each path prefix, for filtering
    lw = np.empty((len(paths), T))
    for n, z in enumerate(paths):
        acc = logphi[z[0]] + logd[0, z[0]]
        lw[n, 0] = acc
        for t in range(1, T):
            acc += logQ[z[t], z[t - 1]] + logd[t, z[t]]
            lw[n, t] = acc
    Z = np.array(paths)
    total = logsumexp(lw[:, -1])
    post = np.exp(lw[:, -1] - total)
    marginal = np.zeros((T, J))
    pairwise = np.zeros((max(T - 1, 0), J, J))
    for n, z in enumerate(paths):
        for t in range(T):
            marginal[t, z[t]] += post[n]
            if t:
                pairwise[t - 1, z[t], z[t - 1]] += post[n]
    filtered = np.zeros((T, J))
    for t in range(T):
        # each prefix appears J^(T-t-1) times; weight prefixes once
        prefixes = {}
        for n, z in enumerate(paths):
            prefixes.setdefault(z[: t + 1], lw[n, t])
        keys = list(prefixes)
        w = np.array([prefixes[k] for k in keys])
        w = np.exp(w - logsumexp(w))
        for k, wk in zip(keys, w):
            filtered[t, k[t]] += wk
    return float(total), marginal, pairwise, filtered


def naive_weighted_covariance(X, w):
    T, N = X.shape
    S = np.zeros((N, N))
    for t in range(T):
        for i in range(N):
            for k in range(N):
                S[i, k] += w[t] * X[t, i] * X[t, k]
    return S / sum(w)


def naive_mixture_loglik(logd, q):
    return float(sum(np.log(sum(q[j] * np.exp(logd[t, j]) for j in range(len(q)))) for t in range(len(logd))))


def naive_sigma2(X, loadings, weights):
    T, N = X.shape
    M = sum(np.outer(x, x) for x in X) / T
    for j, lam in enumerate(loadings):
        M = M - weights[:, j].mean() * lam @ lam.T
    return float(np.trace(M) / N)


def random_loading(rng, N, r, scale=1.0):
    return scale * rng.standard_normal((N, r))


def random_column_stochastic(rng, J, low=0.05):
    Q = rng.uniform(low, 1.0, (J, J))
    return Q / Q.sum(axis=0, keepdims=True)


def random_simplex(rng, J, low=0.05):
    p = rng.uniform(low, 1.0, J)
    return p / p.sum()
