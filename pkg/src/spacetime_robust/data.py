"""Univariate series ingestion, scaling, windowing and chronological splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ColumnNotFound, DegenerateSeries, NonNumericCell, SeriesTooShort, ValidationError


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RawSeries:
    values: np.ndarray
    name: str = "series"
    frequency: Optional[str] = None

    def __post_init__(self):
        arr = _frozen(self.values)
        if arr.ndim != 1:
            raise ValidationError("a RawSeries must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"series {self.name!r} contains NaN or infinite values")
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(self.values[start:stop], name=self.name, frequency=self.frequency)


@dataclass(frozen=True)
class SeriesWindow:
    input: np.ndarray
    target: np.ndarray
    origin_index: int

    def __post_init__(self):
        object.__setattr__(self, "input", _frozen(self.input))
        object.__setattr__(self, "target", _frozen(self.target))


@dataclass(frozen=True)
class Scaler:
    """Affine map ``x -> (x - shift) / scale``."""

    shift: float = 0.0
    scale: float = 1.0
    kind: str = "identity"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValidationError("scaler scale must be a finite positive number")
        if self.kind not in SCALER_KINDS:
            raise ValidationError(f"unknown scaler kind {self.kind!r}")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.shift

    def to_dict(self):
        return {"kind": self.kind, "shift": self.shift, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(shift=float(d["shift"]), scale=float(d["scale"]), kind=d["kind"])


SCALER_KINDS = ("standard", "min-max", "identity")


def fit_scaler(series: Union[RawSeries, Sequence[float]], kind: str = "standard") -> Scaler:
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    if kind == "identity":
        return Scaler(0.0, 1.0, "identity")
    if kind == "standard":
        std = float(np.std(values))
        if std == 0.0:
            raise DegenerateSeries("standard scaling needs a series with nonzero variance")
        return Scaler(float(np.mean(values)), std, "standard")
    if kind == "min-max":
        lo, hi = float(np.min(values)), float(np.max(values))
        if hi <= lo:
            raise DegenerateSeries("min-max scaling needs max > min")
        return Scaler(lo, hi - lo, "min-max")
    raise ValidationError(f"unknown scaler kind {kind!r}; expected one of {SCALER_KINDS}")


def load_csv(path, column: Union[str, int] = 0, name: Optional[str] = None,
             frequency: Optional[str] = None) -> RawSeries:
    """Read one column of a headered CSV file into a :class:`RawSeries`.

    ``column`` is a header name or a zero-based column index.  Missing or
    non-numeric cells raise :class:`NonNumericCell` carrying the one-based
    data row (the first row after the header is row 1).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ColumnNotFound(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if isinstance(column, int) or (isinstance(column, str) and column.isdigit() and column not in header):
            idx = int(column)
            if not 0 <= idx < len(header):
                raise ColumnNotFound(f"column index {idx} out of range for {len(header)} columns")
        else:
            if column not in header:
                raise ColumnNotFound(f"column {column!r} not in header {header}")
            idx = header.index(column)
        values = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            cell = row[idx].strip() if idx < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCell(row_no, cell) from None
            if not math.isfinite(v):
                raise NonNumericCell(row_no, cell)
            values.append(v)
    return RawSeries(np.array(values), name=name or header[idx], frequency=frequency)


def save_csv(path, series: RawSeries, column: Optional[str] = None) -> None:
    """Write ``series`` as a single-column CSV; ``repr`` keeps floats exact."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([column or series.name])
        for v in series.values:
            writer.writerow([repr(float(v))])


def window_count(length: int, lookback: int, horizon: int, stride: int = 1) -> int:
    if length < lookback + horizon:
        return 0
    return (length - horizon - lookback) // stride + 1


def window_arrays(series: Union[RawSeries, np.ndarray], lookback: int, horizon: int, stride: int = 1):
    """Stack all windows as arrays ``(inputs, targets, origins)``.

    ``inputs`` has shape (W, lookback), ``targets`` (W, horizon); origin ``j``
    is the index of the last input sample.
    """
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ValidationError("lookback, horizon and stride must be positive")
    n = values.shape[0]
    if n < lookback + horizon:
        raise SeriesTooShort(f"series of length {n} cannot hold lookback {lookback} + horizon {horizon}")
    origins = np.arange(lookback - 1, n - horizon, stride)
    idx_in = origins[:, None] + np.arange(-lookback + 1, 1)[None, :]
    idx_out = origins[:, None] + np.arange(1, horizon + 1)[None, :]
    return values[idx_in], values[idx_out], origins


def make_windows(series: RawSeries, lookback: int, horizon: int, stride: int = 1) -> list:
    inputs, targets, origins = window_arrays(series, lookback, horizon, stride)
    return [SeriesWindow(x, y, int(j)) for x, y, j in zip(inputs, targets, origins)]


def stack_windows(windows: Sequence[SeriesWindow]):
    return (np.stack([w.input for w in windows]), np.stack([w.target for w in windows]),
            np.array([w.origin_index for w in windows]))


@dataclass(frozen=True)
class SeriesSplit:
    train: RawSeries
    val: RawSeries
    test: RawSeries
    offsets: tuple = field(default=(0, 0, 0))


def chronological_split(series: RawSeries, fractions=(0.7, 0.1, 0.2)) -> SeriesSplit:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValidationError("split fractions must be three nonnegative numbers summing to 1")
    n = len(series)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return SeriesSplit(series.slice(0, a), series.slice(a, b), series.slice(b, n), (0, a, b))
