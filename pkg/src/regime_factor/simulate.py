"""Synthetic regime-switching factor panels.

``x_t = Lambda_{z_t} f_t + e_t`` with AR(1) factors, AR(1) idiosyncratic
errors whose innovations have Toeplitz covariance ``beta^|i-j|``, and
loadings scaled so the signal-to-noise ratio matches a target ``R^2``.

Regime labels in this module are 0-based (regime 1 is ``0``).

Pattern 1 uses the NBER quarterly business-cycle chronology 1945Q2-2020Q1
shipped in ``data/nber_quarterly_1945q2_2020q1.csv``.  A quarter is a
recession (regime 2) if it lies strictly after a peak quarter and no later
than the following trough quarter.  Peaks/troughs used: 1945Q1/1945Q4,
1948Q4/1949Q4, 1953Q2/1954Q2, 1957Q3/1958Q2, 1960Q2/1961Q1, 1969Q4/1970Q4,
1973Q4/1975Q1, 1980Q1/1980Q3, 1981Q3/1982Q4, 1990Q3/1991Q1, 2001Q1/2001Q4,
2007Q4/2009Q2 (44 recession quarters out of 300).

All draws use Philox generators spawned from ``SimConfig.seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .em_static import make_rng
from .model import InvalidInputError, Panel

PATTERN4_Q11 = 0.95
PATTERN4_Q22 = 0.72


@dataclass(frozen=True)
class SimConfig:
    N: int = 100
    T: int = 300
    dgp: int = 1
    rho: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    r2: float = 0.5
    pattern: int = 2
    seed: int = 0
    noise_scale: float = 1.0
    q11: float = PATTERN4_Q11
    q22: float = PATTERN4_Q22
    labels: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.dgp not in (1, 2, 3):
            raise InvalidInputError(f"dgp must be 1, 2 or 3, got {self.dgp}")
        if self.pattern not in (1, 2, 3, 4):
            raise InvalidInputError(f"pattern must be 1..4, got {self.pattern}")
        if not (abs(self.rho) < 1 and abs(self.alpha) < 1 and 0 <= self.beta < 1):
            raise InvalidInputError("need |rho| < 1, |alpha| < 1 and 0 <= beta < 1")
        if not 0 < self.r2 < 1:
            raise InvalidInputError("r2 must lie in (0, 1)")
        if self.N < 1 or self.T < 2:
            raise InvalidInputError("need N >= 1 and T >= 2")

    @property
    def n_factors(self) -> int:
        return 1 if self.dgp == 3 else 2


@dataclass
class SimTruth:
    panel: Panel
    factors: np.ndarray
    loadings: list[np.ndarray]
    states: np.ndarray
    pattern_meta: dict = field(default_factory=dict)
    config: SimConfig | None = None


def gen_factors(T: int, r: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Independent stationary AR(1) columns with innovation variance one."""
    if not abs(rho) < 1:
        raise InvalidInputError("|rho| must be < 1")
    eps = rng.standard_normal((T, r))
    f = np.empty((T, r))
    f[0] = eps[0] / np.sqrt(1.0 - rho**2)
    for t in range(1, T):
        f[t] = rho * f[t - 1] + eps[t]
    return f


def toeplitz_innovations(T: int, N: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Rows ``~ N(0, Omega)`` with ``Omega_ij = beta^|i-j|``.

    Uses the cross-sectional AR(1) representation ``v_i = beta v_{i-1} +
    sqrt(1 - beta^2) u_i`` whose covariance is exactly ``Omega``.
    """
    u = rng.standard_normal((T, N))
    if beta == 0:
        return u
    v = np.empty_like(u)
    v[:, 0] = u[:, 0]
    scale = np.sqrt(1.0 - beta**2)
    for i in range(1, N):
        v[:, i] = beta * v[:, i - 1] + scale * u[:, i]
    return v


def gen_errors(T: int, N: int, alpha: float, beta: float, rng: np.random.Generator) -> np.ndarray:
    if not (abs(alpha) < 1 and 0 <= beta < 1):
        raise InvalidInputError("need |alpha| < 1 and 0 <= beta < 1")
    v = toeplitz_innovations(T, N, beta, rng)
    e = np.empty_like(v)
    e[0] = v[0] / np.sqrt(1.0 - alpha**2)
    for t in range(1, T):
        e[t] = alpha * e[t - 1] + v[t]
    return e


def loading_variance(dgp: int, rho: float, alpha: float, r2: float) -> float:
    base = (1.0 - rho**2) / (1.0 - alpha**2) * r2 / (1.0 - r2)
    return base if dgp == 3 else 2.0 * base


def gen_loadings(N: int, dgp: int, rho: float, alpha: float, r2: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """True loadings for regimes 1 and 2.

    DGP 1: independent ``N x 2`` draws.  DGP 2: the first column is shared
    and only the second switches.  DGP 3: independent ``N x 1`` draws.
    """
    sd = np.sqrt(loading_variance(dgp, rho, alpha, r2))
    if dgp == 1:
        return sd * rng.standard_normal((N, 2)), sd * rng.standard_normal((N, 2))
    if dgp == 2:
        draw = sd * rng.standard_normal((N, 3))
        lam1 = draw[:, :2].copy()
        lam2 = np.column_stack([draw[:, 0], draw[:, 2]])
        return lam1, lam2
    if dgp == 3:
        return sd * rng.standard_normal((N, 1)), sd * rng.standard_normal((N, 1))
    raise InvalidInputError(f"unknown dgp {dgp}")


def nber_quarterly_states() -> np.ndarray:
    """0-based NBER labels for 1945Q2-2020Q1 (length 300; 1 = recession)."""
    text = resources.files("regime_factor").joinpath("data/nber_quarterly_1945q2_2020q1.csv").read_text()
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    return np.array([int(r[1]) - 1 for r in rows], dtype=int)


def read_label_file(path: str | Path) -> np.ndarray:
    """One integer (1-based) regime label per line; returns 0-based labels."""
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            labels.append(int(line) - 1)
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: not an integer label: {line!r}") from exc
    return np.array(labels, dtype=int)


def simulate_markov_chain(T: int, Q: np.ndarray, rng: np.random.Generator, init: np.ndarray | None = None) -> np.ndarray:
    """Chain with ``Q[j, k] = Pr(k -> j)``; starts from ``init`` or the
    stationary distribution."""
    J = Q.shape[0]
    if init is None:
        w, v = np.linalg.eig(Q)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        init = pi / pi.sum()
    u = rng.random(T)
    z = np.empty(T, dtype=int)
    z[0] = min(int(np.searchsorted(np.cumsum(init), u[0], side="right")), J - 1)
    cums = np.cumsum(Q, axis=0)
    for t in range(1, T):
        z[t] = min(int(np.searchsorted(cums[:, z[t - 1]], u[t], side="right")), J - 1)
    return z


def gen_states(T: int, pattern: int, rng: np.random.Generator, labels=None,
               q11: float = PATTERN4_Q11, q22: float = PATTERN4_Q22) -> tuple[np.ndarray, dict]:
    """0-based regime labels for one of the four regime patterns."""
    if pattern == 1:
        z = np.asarray(labels, dtype=int) if labels is not None else nber_quarterly_states()
        if z.size != T:
            raise InvalidInputError(f"pattern 1 labels have length {z.size}, need T={T}")
        return z.copy(), {"pattern": 1, "source": "user labels" if labels is not None else "NBER 1945Q2-2020Q1"}
    if pattern == 2:
        z = np.zeros(T, dtype=int)
        z[T // 2:] = 1
        return z, {"pattern": 2, "breaks": [T // 2 + 1]}
    if pattern == 3:
        z = np.zeros(T, dtype=int)
        z[T // 3: 2 * T // 3] = 1
        return z, {"pattern": 3, "breaks": [T // 3 + 1, 2 * T // 3 + 1]}
    if pattern == 4:
        Q = np.array([[q11, 1.0 - q22], [1.0 - q11, q22]])
        return simulate_markov_chain(T, Q, rng), {"pattern": 4, "Q": Q.tolist()}
    raise InvalidInputError(f"unknown pattern {pattern}")


def simulate_panel(config: SimConfig) -> SimTruth:
    """Draw one synthetic panel together with its ground truth."""
    ss = np.random.SeedSequence(config.seed).spawn(4)
    rng_load, rng_fac, rng_err, rng_state = (make_rng(s) for s in ss)
    lam1, lam2 = gen_loadings(config.N, config.dgp, config.rho, config.alpha, config.r2, rng_load)
    f = gen_factors(config.T, config.n_factors, config.rho, rng_fac)
    e = gen_errors(config.T, config.N, config.alpha, config.beta, rng_err)
    z, meta = gen_states(config.T, config.pattern, rng_state, config.labels, config.q11, config.q22)
    loadings = [lam1, lam2]
    common = np.where((z == 0)[:, None], f @ lam1.T, f @ lam2.T)
    X = common + config.noise_scale * e
    return SimTruth(Panel(X), f, loadings, z, meta, config)
