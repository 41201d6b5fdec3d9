"""Turning-point detection from regime-probability series.

Offline rule: average the probability of the target regime over the last
``d + 1`` periods and run a hysteresis state machine; a crossing observed
at ``t`` dates the turning point at ``t - d``.

Real-time rule: for each period ``s`` after a warm-up, fit the smoothed
model on data through ``s - 1`` and update the filter with ``x_s`` alone.
The filtered probability of ``s`` then feeds the same state machine with
``d = 0``.

Detection lags in reports count periods until the signal is available:
a switch starting in period ``e`` that is flagged by the data of period
``s`` has lag ``s - e + 1``, since period ``s`` data arrive at the start of
``s + 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .em_dynamic import filter_step, fit_dynamic, hamilton_filter
from .em_static import EMConfig
from .model import (
    DegenerateWeightsError,
    FitFailureError,
    InvalidInputError,
    MarkovState,
    NumericalUnderflowError,
    PanelLike,
    ProbSeries,
    as_panel,
)

log = logging.getLogger(__name__)

ENTER, EXIT = "enter", "exit"


@dataclass(frozen=True)
class DetectorConfig:
    d: int = 0
    enter_threshold: float = 0.9
    exit_threshold: float = 0.1
    initial_phase: int = 0

    def __post_init__(self) -> None:
        if self.d < 0:
            raise InvalidInputError("d must be >= 0")
        if not 0 < self.exit_threshold < self.enter_threshold < 1:
            raise InvalidInputError("need 0 < exit_threshold < enter_threshold < 1")
        if self.initial_phase not in (0, 1):
            raise InvalidInputError("initial_phase must be 0 (outside) or 1 (inside)")

    @classmethod
    def empirical(cls, initial_phase: int = 0) -> "DetectorConfig":
        return cls(d=0, enter_threshold=0.8, exit_threshold=0.2, initial_phase=initial_phase)


@dataclass(frozen=True)
class TurningPoint:
    t: int
    direction: str
    detection_lag: int

    @property
    def trigger(self) -> int:
        return self.t + self.detection_lag


@dataclass
class TurningPoints:
    points: list[TurningPoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]

    @property
    def dates(self) -> list[int]:
        return [p.t for p in self.points]

    @property
    def directions(self) -> list[str]:
        return [p.direction for p in self.points]

    def check(self) -> None:
        for a, b in zip(self.points, self.points[1:]):
            if a.direction == b.direction or b.t <= a.t:
                raise AssertionError("turning points must alternate with increasing dates")


def moving_average(probs, d: int) -> np.ndarray:
    """Trailing mean over ``d + 1`` terms; the window shrinks for ``t < d``."""
    if d < 0:
        raise InvalidInputError("d must be >= 0")
    p = np.asarray(probs, dtype=float).ravel()
    c = np.concatenate([[0.0], np.cumsum(p)])
    t = np.arange(p.size)
    lo = np.maximum(t - d, 0)
    return (c[t + 1] - c[lo]) / (t + 1 - lo)


def _point(offset: int, t: int, d: int, direction: str) -> TurningPoint:
    date = max(t - d, 0)
    return TurningPoint(offset + date, direction, t - date)


def detect_turning_points(probs, config: DetectorConfig, offset: int = 0) -> TurningPoints:
    """Hysteresis detection on the moving average of ``probs``.

    ``offset`` is added to every reported date (for series that start late).
    NaN entries are skipped without changing the state.
    """
    p = moving_average(probs, config.d) if config.d else np.asarray(probs, dtype=float).ravel()
    phase = config.initial_phase
    out = []
    for t, v in enumerate(p):
        if np.isnan(v):
            continue
        if phase == 0 and v > config.enter_threshold:
            phase = 1
            out.append(_point(offset, t, config.d, ENTER))
        elif phase == 1 and v < config.exit_threshold:
            phase = 0
            out.append(_point(offset, t, config.d, EXIT))
    # with a shrinking window, early crossings can date before an earlier point
    kept: list[TurningPoint] = []
    for tp in out:
        if kept and tp.t <= kept[-1].t:
            tp = replace(tp, t=kept[-1].t + 1, detection_lag=tp.trigger - kept[-1].t - 1)
        kept.append(tp)
    return TurningPoints(kept)


# ---------------------------------------------------------------------------
# Real-time pipeline
# ---------------------------------------------------------------------------


@dataclass
class RealtimeResult:
    periods: np.ndarray
    probabilities: np.ndarray
    turning_points: TurningPoints
    failures: list[int]


def _standardize_window(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    sd[sd <= 0] = 1.0
    return (X - mu) / sd, mu, sd


def _label_probs(labels: np.ndarray, J: int) -> ProbSeries:
    return ProbSeries(np.eye(J)[labels].astype(float))


def realtime_detect(panel: PanelLike, dims: Sequence[int], detector: DetectorConfig | None = None,
                    estimation: EMConfig | None = None, warmup: int | None = None, *,
                    markov: MarkovState | None = None, labels=None, regime: int = 1,
                    stride: int = 1, standardize: bool = True, min_warmup_factor: int = 10) -> RealtimeResult:
    """Expanding-window filtered probabilities of ``regime`` for periods ``warmup..T-1``.

    ``labels`` (0-based, optional) seed the first window's probabilities and
    the detector's initial phase.  Later windows warm-start from the previous
    window's parameters.  Parameters are refit every ``stride`` periods.
    A window whose fit fails yields NaN for that period.
    """
    panel = as_panel(panel)
    X = panel.values
    T = panel.T
    J = len(dims)
    detector = detector or DetectorConfig.empirical()
    estimation = estimation or EMConfig(n_trials=5)
    markov = markov or (MarkovState.two_state(0.95, 0.72) if J == 2 else MarkovState.uniform(J))
    min_warm = min_warmup_factor * J * max(dims)
    warmup = min_warm if warmup is None else warmup
    if warmup < min_warm or warmup >= T:
        raise InvalidInputError(f"warmup must lie in [{min_warm}, T); got {warmup}")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        if labels.size < warmup:
            raise InvalidInputError("labels must cover the warm-up sample")
        if detector.initial_phase != int(labels[warmup - 1] == regime):
            detector = replace(detector, initial_phase=int(labels[warmup - 1] == regime))

    periods = np.arange(warmup, T)
    probs = np.full(periods.size, np.nan)
    failures: list[int] = []
    fit = None
    for n, s in enumerate(periods):
        window = X[:s]
        if standardize:
            window, mu, sd = _standardize_window(window)
            x_new = (X[s] - mu) / sd
        else:
            x_new = X[s]
        if fit is None or n % stride == 0:
            if fit is None:
                init = {"init_probs": _label_probs(labels[:s], J)} if labels is not None and labels.size >= s else {}
                cfg = replace(estimation, **init)
            else:
                cfg = replace(estimation, n_trials=1, init_params=fit.params, init_probs=None)
            try:
                fit = fit_dynamic(window, dims, markov, cfg)
            except (FitFailureError, DegenerateWeightsError, NumericalUnderflowError) as exc:
                log.warning("estimation failed for window ending at %d: %s", s - 1, exc)
                failures.append(int(s))
                fit = None
                continue
        try:
            state = fit.state if isinstance(fit.state, MarkovState) else markov
            prev = hamilton_filter(window, fit.params, state).filtered[-1]
            probs[n] = filter_step(prev, x_new, fit.params, state)[regime]
        except NumericalUnderflowError as exc:
            log.warning("filter failed at period %d: %s", s, exc)
            failures.append(int(s))
    tps = detect_turning_points(probs, replace(detector, d=0), offset=warmup)
    return RealtimeResult(periods, probs, tps, failures)


def match_reference(tps: TurningPoints, reference: Sequence[tuple[int, str]]) -> list[int | None]:
    """Detection lag (``trigger - event + 1``) for each reference event, using
    the first detected point with the same direction at or after the event and
    before the next reference event; ``None`` if there is none."""
    out = []
    for i, (t_ref, direction) in enumerate(reference):
        stop = reference[i + 1][0] if i + 1 < len(reference) else np.inf
        hit = next((p for p in tps if p.direction == direction and t_ref <= p.trigger < stop), None)
        out.append(None if hit is None else hit.trigger - t_ref + 1)
    return out


def format_report(tps: TurningPoints, dates: Sequence[str] | None = None,
                  reference: Sequence[tuple[int, str]] | None = None, per_row: int = 5) -> str:
    """Human-readable table: event type, start date, and detection lag.

    With ``reference`` events the columns are the reference events and the
    lag row uses :func:`match_reference`; otherwise columns are the detected
    points themselves.
    """
    def label(t: int) -> str:
        return dates[t] if dates is not None and 0 <= t < len(dates) else str(t + 1)

    name = {ENTER: "Recession", EXIT: "Expansion"}
    if reference is not None:
        events = [(t, d) for t, d in reference]
        lags = ["N.A." if v is None else str(v) for v in match_reference(tps, reference)]
    else:
        events = [(p.t, p.direction) for p in tps]
        lags = [str(p.detection_lag + 1) for p in tps]
    if not events:
        return "No turning points detected.\n"
    lines = []
    for start in range(0, len(events), per_row):
        chunk = range(start, min(start + per_row, len(events)))
        rows = [
            [""] + [name[events[i][1]] for i in chunk],
            [""] + [label(events[i][0]) for i in chunk],
            ["This method"] + [lags[i] for i in chunk],
        ]
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        for r in rows:
            lines.append("  ".join(cell.rjust(w) if c else cell.ljust(w) for c, (cell, w) in enumerate(zip(r, widths))).rstrip())
        lines.append("")
    return "\n".join(lines)
