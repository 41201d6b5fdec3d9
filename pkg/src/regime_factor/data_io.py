"""Panel ingestion and preprocessing.

CSV layout: first row series names, optional first column of dates, and
optionally a second row of integer transformation codes whose first cell
starts with ``Transform`` (FRED-MD convention).  Empty cells are missing.

Transformation codes: 1 level, 2 first difference, 3 second difference,
4 log, 5 log difference, 6 second log difference, 7 first difference of the
growth rate ``x_t / x_{t-1} - 1``.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .model import InvalidInputError, Panel

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
STD_DDOF = 1


class ParseError(InvalidInputError):
    pass


@dataclass
class RawTable:
    """Series in columns; ``NaN`` marks a missing cell."""

    names: list[str]
    values: np.ndarray
    dates: list[str] | None = None
    codes: dict[str, int] | None = None

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=self.names)
        if self.dates is not None:
            df.insert(0, "date", self.dates)
        return df


@dataclass
class Scaling:
    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    ddof: int = STD_DDOF
    dropped_missing: list[str] = field(default_factory=list)
    dropped_constant: list[str] = field(default_factory=list)

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) * self.std + self.mean


def _is_codes_row(cells: Sequence[str]) -> bool:
    return bool(cells) and cells[0].strip().lower().startswith("transform")


def load_panel(path: str | Path, has_header: bool = True, date_column: str | int | None = None,
               codes_row: bool | None = None) -> RawTable:
    """Read a CSV panel.

    ``date_column`` names (or indexes) a column of period labels; ``"auto"``
    uses the first column when its header is empty or contains "date".
    ``codes_row=None`` detects a transformation-code row automatically.
    """
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    while rows and not any(c.strip() for c in rows[-1]):
        rows.pop()
    if not rows:
        raise ParseError(f"{path}: empty file")
    first_line = 1
    if has_header:
        header = [c.strip() for c in rows[0]]
        body = rows[1:]
        first_line = 2
    else:
        header = None
        body = rows
    width = len(header) if header is not None else len(body[0])
    for k, row in enumerate(body):
        if len(row) != width:
            raise ParseError(f"{path}: line {first_line + k}: expected {width} fields, got {len(row)}")
    if header is None:
        header = [f"x{i + 1}" for i in range(width)]

    date_idx = None
    if date_column == "auto":
        h0 = header[0].lower()
        date_idx = 0 if (h0 == "" or "date" in h0) else None
    elif isinstance(date_column, int):
        date_idx = date_column
    elif date_column is not None:
        if date_column not in header:
            raise InvalidInputError(f"date column {date_column!r} not in header")
        date_idx = header.index(date_column)

    code_cells = None
    if body and (codes_row or (codes_row is None and has_header and _is_codes_row(body[0]))):
        code_cells, body = body[0], body[1:]
        first_line += 1

    cols = [i for i in range(width) if i != date_idx]
    names = [header[i] for i in cols]
    values = np.empty((len(body), len(cols)))
    for k, row in enumerate(body):
        for c, i in enumerate(cols):
            cell = row[i].strip()
            try:
                values[k, c] = float(cell) if cell else np.nan
            except ValueError:
                raise ParseError(f"{path}: line {first_line + k}: non-numeric value {cell!r} in {names[c]!r}") from None
    dates = [row[date_idx].strip() for row in body] if date_idx is not None else None
    codes = None
    if code_cells is not None:
        try:
            codes = {names[c]: int(float(code_cells[i])) for c, i in enumerate(cols)}
        except ValueError as exc:
            raise ParseError(f"{path}: line {first_line - 1}: invalid transformation code") from exc
    return RawTable(names, values, dates, codes)


def read_codes(path: str | Path) -> dict[str, int]:
    """Sidecar CSV with header ``series,code``."""
    df = pd.read_csv(path, dtype={"series": str})
    if list(df.columns[:2]) != ["series", "code"]:
        raise ParseError(f"{path}: expected header 'series,code'")
    return {str(s): int(c) for s, c in zip(df["series"], df["code"])}


def write_panel(path: str | Path, values: np.ndarray, names: Sequence[str] | None = None,
                dates: Sequence[str] | None = None) -> None:
    """Write a panel CSV at 17 significant digits (lossless for doubles)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(values.shape[1])]
    df = pd.DataFrame(values, columns=names)
    if dates is not None:
        df.insert(0, "date", list(dates))
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_table(path: str | Path, table: RawTable) -> None:
    write_panel(path, table.values, table.names, table.dates)


def _transform(x: np.ndarray, code: int, name: str) -> np.ndarray:
    if code in (4, 5, 6):
        bad = x <= 0
        if np.any(bad):
            warnings.warn(f"series {name!r}: log of non-positive values set to missing", RuntimeWarning, stacklevel=3)
            x = np.where(bad, np.nan, x)
        x = np.log(x)
    out = np.full_like(x, np.nan)
    if code in (1, 4):
        out = x.copy()
    elif code in (2, 5):
        out[1:] = np.diff(x)
    elif code in (3, 6):
        out[2:] = np.diff(x, n=2)
    elif code == 7:
        growth = np.full_like(x, np.nan)
        growth[1:] = x[1:] / x[:-1] - 1.0
        out[1:] = np.diff(growth)
    else:
        raise InvalidInputError(f"series {name!r}: transformation code must be 1..7, got {code}")
    return out


def apply_transforms(table: RawTable, codes: Mapping[str, int] | Sequence[int] | None = None) -> RawTable:
    """Transformed copy of ``table``.  ``codes`` defaults to ``table.codes``."""
    codes = table.codes if codes is None else codes
    if codes is None:
        raise InvalidInputError("no transformation codes given")
    if not isinstance(codes, Mapping):
        codes = list(codes)
        if len(codes) != len(table.names):
            raise InvalidInputError("need one code per series")
        codes = dict(zip(table.names, codes))
    missing = [n for n in table.names if n not in codes]
    if missing:
        raise InvalidInputError(f"no transformation code for {missing}")
    out = np.column_stack([_transform(table.values[:, i], int(codes[n]), n) for i, n in enumerate(table.names)]) \
        if table.names else table.values.copy()
    with np.errstate(invalid="ignore"):
        out[~np.isfinite(out)] = np.nan
    return RawTable(list(table.names), out, table.dates, dict(codes))


def _resolve_rows(table: RawTable, rows) -> slice:
    if rows is None:
        return slice(None)
    if isinstance(rows, slice):
        return rows
    start, stop = rows
    if isinstance(start, str) or isinstance(stop, str):
        if table.dates is None:
            raise InvalidInputError("date range given but the table has no dates")
        try:
            i0 = table.dates.index(start) if start is not None else 0
            i1 = table.dates.index(stop) + 1 if stop is not None else len(table.dates)
        except ValueError as exc:
            raise InvalidInputError(f"date not found: {exc}") from exc
        return slice(i0, i1)
    return slice(start, stop)


def balance_and_standardize(table: RawTable, rows=None) -> tuple[Panel, Scaling]:
    """Keep series complete over ``rows``, then demean and scale each to unit
    sample standard deviation (denominator ``T - 1``).

    ``rows`` is a slice, a ``(start, stop)`` pair of 0-based indices (stop
    exclusive) or a pair of date labels (both inclusive).
    """
    sl = _resolve_rows(table, rows)
    X = table.values[sl]
    names = list(table.names)
    complete = ~np.isnan(X).any(axis=0)
    dropped_missing = [n for n, ok in zip(names, complete) if not ok]
    X = X[:, complete]
    names = [n for n, ok in zip(names, complete) if ok]
    if X.shape[0] < 2:
        raise InvalidInputError("need at least two periods")
    sd = X.std(axis=0, ddof=STD_DDOF)
    mu = X.mean(axis=0)
    constant = ~(sd > 1e-12 * np.maximum(1.0, np.abs(mu)))
    dropped_constant = [n for n, c in zip(names, constant) if c]
    if dropped_constant:
        warnings.warn(f"dropping constant series: {dropped_constant}", RuntimeWarning, stacklevel=2)
    keep = ~constant
    X, mu, sd = X[:, keep], mu[keep], sd[keep]
    names = [n for n, k in zip(names, keep) if k]
    if not names:
        raise InvalidInputError("no usable series remain")
    if dropped_missing:
        log.info("dropped %d series with missing values", len(dropped_missing))
    Z = (X - mu) / sd
    return Panel(Z), Scaling(names, mu, sd, STD_DDOF, dropped_missing, dropped_constant)
