"""Price/target transforms, feature standardization, lagging, windowing and splits.

Everything here is a pure function over immutable containers. Arrays stored on
the dataclasses are marked read-only on construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from datetime import date, datetime

import numpy as np

from .errors import DataError

Timestamp = date | datetime


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PricePoint:
    timestamp: Timestamp
    open: float
    close: float

    def __post_init__(self):
        if not (self.open > 0 and self.close > 0):
            raise DataError(f"non-positive price at {self.timestamp}: open={self.open}, close={self.close}")


@dataclass(frozen=True)
class PriceSeries:
    points: tuple[PricePoint, ...]
    frequency: str = "daily"

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if self.frequency not in ("daily", "hourly"):
            raise DataError(f"unknown frequency {self.frequency!r}")
        if len(self.points) < 2:
            raise DataError("a price series needs at least 2 points")
        for prev, cur in zip(self.points, self.points[1:]):
            if not cur.timestamp > prev.timestamp:
                raise DataError(f"timestamps not strictly increasing at {cur.timestamp}")

    def __len__(self):
        return len(self.points)

    @property
    def timestamps(self) -> tuple[Timestamp, ...]:
        return tuple(p.timestamp for p in self.points)

    @property
    def opens(self) -> np.ndarray:
        return np.array([p.open for p in self.points])

    @property
    def closes(self) -> np.ndarray:
        return np.array([p.close for p in self.points])

    def slice(self, start: int, stop: int) -> "PriceSeries":
        return PriceSeries(self.points[start:stop], self.frequency)

    @classmethod
    def from_arrays(cls, timestamps, opens, closes, frequency="daily") -> "PriceSeries":
        pts = tuple(PricePoint(t, float(o), float(c)) for t, o, c in zip(timestamps, opens, closes))
        return cls(pts, frequency)


@dataclass(frozen=True)
class TargetSeries:
    values: np.ndarray
    timestamps: tuple[Timestamp, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if self.values.ndim != 1 or len(self.values) != len(self.timestamps):
            raise DataError("target values and timestamps must align")
        if not np.all(np.isfinite(self.values)):
            raise DataError("target contains non-finite values")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class FeatureMatrix:
    """N x T covariates; rows are features, columns are time steps."""

    names: tuple[str, ...]
    data: np.ndarray
    timestamps: tuple[Timestamp, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "data", _frozen(self.data))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise DataError("feature data must be a non-empty N x T matrix")
        if self.data.shape[0] != len(self.names):
            raise DataError(f"{len(self.names)} names for {self.data.shape[0]} feature rows")
        if self.data.shape[1] != len(self.timestamps):
            raise DataError("feature column count differs from timestamp count")
        if not np.all(np.isfinite(self.data)):
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise DataError(f"non-finite feature value for {self.names[bad[0]]} at {self.timestamps[bad[1]]}")

    @property
    def n_features(self) -> int:
        return self.data.shape[0]

    def __len__(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureStats:
    """Training-range statistics per feature.

    ``lower``/``upper`` are the raw historical min/max expressed in
    standardized units; they are what the bounds check uses.
    """

    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    zero_variance: np.ndarray

    def __post_init__(self):
        for name in ("mean", "std", "min", "max"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "zero_variance", _frozen(self.zero_variance, dtype=bool))

    @property
    def scale(self) -> np.ndarray:
        # zero-variance features are only centered
        return np.where(self.zero_variance, 1.0, self.std)

    @property
    def lower(self) -> np.ndarray:
        return (self.min - self.mean) / self.scale

    @property
    def upper(self) -> np.ndarray:
        return (self.max - self.mean) / self.scale

    def standardize(self, values: np.ndarray) -> np.ndarray:
        """Standardize an N x T (or N-vector) array of raw values."""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return (values - self.mean) / self.scale
        return (values - self.mean[:, None]) / self.scale[:, None]

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return values * self.scale + self.mean
        return values * self.scale[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
            "zero_variance": self.zero_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(d["mean"], d["std"], d["min"], d["max"], d["zero_variance"])


@dataclass(frozen=True)
class SplitSpec:
    """Half-open index ranges ``(start, stop)``."""

    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]

    def __post_init__(self):
        (a, b), (c, d), (e, f) = self.train, self.valid, self.test
        if not (0 <= a < b == c < d == e < f):
            raise DataError(f"split ranges must be contiguous, ascending and non-empty: {self}")

    def range(self, name: str) -> tuple[int, int]:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "valid": list(self.valid), "test": list(self.test)}


@dataclass(frozen=True)
class WindowSpec:
    history_len: int
    horizon: int = 1

    def __post_init__(self):
        if self.history_len < 1 or self.horizon < 1:
            raise ValueError("history_len and horizon must both be >= 1")


@dataclass(frozen=True)
class Window:
    """One training/evaluation sample anchored at index ``anchor`` (the last observed step).

    ``x_history`` row j holds the (lagged) covariates that accompany target
    ``z_history[j]`` when predicting the next step.
    """

    anchor: int
    z_history: np.ndarray
    x_history: np.ndarray
    z_future: np.ndarray

    def __post_init__(self):
        for name in ("z_history", "x_history", "z_future"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))


def log_diff_transform(prices: PriceSeries) -> TargetSeries:
    values = []
    for p in prices.points:
        if not (p.open > 0 and p.close > 0):
            raise DataError(f"non-positive price at {p.timestamp}")
        values.append(math.log(p.close / p.open))
    return TargetSeries(np.array(values), prices.timestamps)


def target_to_return(z):
    """Map a log-return (scalar or array) to a simple return fraction."""
    return np.expm1(z)


def standardize_features(X: FeatureMatrix, split: SplitSpec) -> tuple[FeatureMatrix, FeatureStats]:
    start, stop = split.train
    train = X.data[:, start:stop]
    if train.shape[1] == 0:
        raise DataError("empty training range")
    mean = train.mean(axis=1)
    std = train.std(axis=1)
    zero_var = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    stats = FeatureStats(mean, std, train.min(axis=1), train.max(axis=1), zero_var)
    return FeatureMatrix(X.names, stats.standardize(X.data), X.timestamps), stats


def lag_covariates(X: FeatureMatrix, lag: int) -> FeatureMatrix:
    T = len(X)
    if lag < 1 or lag >= T:
        raise DataError(f"lag must satisfy 1 <= lag < T={T}, got {lag}")
    shifted = np.empty_like(X.data)
    shifted[:, lag:] = X.data[:, :-lag]
    shifted[:, :lag] = X.data[:, :1]
    return FeatureMatrix(X.names, shifted, X.timestamps)


def make_windows(
    z: TargetSeries | np.ndarray,
    X: FeatureMatrix | np.ndarray,
    w: WindowSpec,
    split_range: tuple[int, int],
) -> list[Window]:
    """Stride-1 windows fully contained in ``split_range``.

    A window anchored at T uses targets T-k+1..T as history and T+1..T+horizon
    as futures. Its covariate rows come from steps T-k+2..T+1 of the lagged
    matrix, i.e. the covariates paired with the step each history target is
    used to predict. With lag >= 1 those columns only carry information from
    times <= T.
    """
    zv = np.asarray(getattr(z, "values", z), dtype=float)
    xv = np.asarray(getattr(X, "data", X), dtype=float)
    start, stop = split_range
    k, h = w.history_len, w.horizon
    if stop - start < k + h:
        warnings.warn(f"range {split_range} is shorter than history+horizon={k + h}; no windows", stacklevel=2)
        return []
    out = []
    for anchor in range(start + k - 1, stop - h):
        out.append(
            Window(
                anchor=anchor,
                z_history=zv[anchor - k + 1 : anchor + 1],
                x_history=xv[:, anchor - k + 2 : anchor + 2].T,
                z_future=zv[anchor + 1 : anchor + 1 + h],
            )
        )
    return out


_PUBLISHED_SPLITS = {
    ("daily", 1306): SplitSpec((0, 1150), (1150, 1190), (1190, 1306)),
    ("hourly", 2890): SplitSpec((0, 2550), (2550, 2700), (2700, 2890)),
}
_PROPORTIONS = {"daily": (0.88, 0.03), "hourly": (2550 / 2890, 150 / 2890)}


def apply_split(T: int, frequency: str = "daily", min_len: int = 2) -> SplitSpec:
    """Train/valid/test split; ``min_len`` is the shortest usable range (k + horizon)."""
    if (frequency, T) in _PUBLISHED_SPLITS:
        return _PUBLISHED_SPLITS[(frequency, T)]
    if frequency not in _PROPORTIONS:
        raise DataError(f"unknown frequency {frequency!r}")
    p_train, p_valid = _PROPORTIONS[frequency]
    n_train = math.floor(T * p_train + 1e-9)
    n_valid = math.floor(T * p_valid + 1e-9)
    n_test = T - n_train - n_valid
    if min(n_train, n_valid, n_test) < min_len:
        raise DataError(f"series of length {T} too short for splits of at least {min_len} steps")
    return SplitSpec((0, n_train), (n_train, n_train + n_valid), (n_train + n_valid, T))

