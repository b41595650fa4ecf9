"""CSV ingestion and synthetic market data.

Price CSV: ``date,open,close``. Feature CSV: ``date,<name_1>,...,<name_N>``.
Daily dates are ISO ``YYYY-MM-DD``; hourly rows use ``YYYY-MM-DDTHH:00``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import DataError
from .timeseries import FeatureMatrix, PricePoint, PriceSeries


@dataclass(frozen=True)
class SyntheticSpec:
    length: int = 600
    n_features: int = 13
    coupling: float = 0.02  # alpha: weight of feature 1's previous value in the target
    noise_scale: float = 0.01
    base_price: float = 100.0
    seed: int = 0
    autocorrelation: float = 0.5
    frequency: str = "daily"

    def __post_init__(self):
        if self.length < 10:
            raise ValueError("synthetic length must be at least 10")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if not -1 < self.autocorrelation < 1:
            raise ValueError("autocorrelation must lie in (-1, 1)")


def _timestamps(n: int, frequency: str, start=date(2018, 1, 2)):
    out = []
    day = start
    while len(out) < n:
        if day.weekday() < 5:
            if frequency == "daily":
                out.append(day)
            else:
                for hour in range(10, 17):
                    out.append(datetime(day.year, day.month, day.day, hour))
        day += timedelta(days=1)
    return out[:n]


def feature_names(n: int) -> list[str]:
    return [f"f{i + 1}" for i in range(n)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[PriceSeries, FeatureMatrix, np.ndarray]:
    """Prices and unit-variance AR(1) features with target ``z_t = alpha * x1[t-1] + noise``.

    Returns ``(prices, features, z)``; ``z`` is the generated log-return.
    """
    rng = np.random.default_rng(spec.seed)
    T, N, phi = spec.length, spec.n_features, spec.autocorrelation
    innov = rng.standard_normal((N, T))
    x = np.empty((N, T))
    x[:, 0] = innov[:, 0]
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, T):
        x[:, t] = phi * x[:, t - 1] + scale * innov[:, t]
    x1_prev = np.concatenate([[0.0], x[0, :-1]])
    z = spec.coupling * x1_prev + spec.noise_scale * rng.standard_normal(T)
    opens = spec.base_price * np.exp(np.concatenate([[0.0], np.cumsum(z[:-1])]))
    closes = opens * np.exp(z)
    stamps = _timestamps(T, spec.frequency)
    prices = PriceSeries(
        tuple(PricePoint(s, float(o), float(c)) for s, o, c in zip(stamps, opens, closes)),
        spec.frequency,
    )
    return prices, FeatureMatrix(feature_names(N), x, stamps), z


# CSV -------------------------------------------------------------------------


def _parse_stamp(text: str, row: int, path) -> date | datetime:
    text = text.strip()
    try:
        if "T" in text or " " in text:
            return datetime.fromisoformat(text)
        return date.fromisoformat(text)
    except ValueError:
        raise DataError(f"{path}: row {row}, column date: unparseable date {text!r}") from None


def _format_stamp(ts) -> str:
    if isinstance(ts, datetime):
        return ts.strftime("%Y-%m-%dT%H:00")
    return ts.isoformat()


def _parse_float(text: str, row: int, col: str, path) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataError(f"{path}: row {row}, column {col}: non-numeric value {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row}, column {col}: non-finite value {text!r}")
    return v


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not header or header[0] != "date":
        raise DataError(f"{path}: first column must be 'date'")
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} cells, expected {len(header)}")
    return header, rows


def _dates(rows, path) -> list:
    stamps, seen = [], set()
    for i, r in enumerate(rows, start=2):
        ts = _parse_stamp(r[0], i, path)
        if ts in seen:
            raise DataError(f"{path}: row {i}: duplicate date {r[0]}")
        seen.add(ts)
        stamps.append(ts)
    return stamps


def load_prices(path, frequency: str | None = None) -> PriceSeries:
    header, rows = _read_rows(path)
    for col in ("open", "close"):
        if col not in header:
            raise DataError(f"{path}: missing column {col!r}")
    io_, ic = header.index("open"), header.index("close")
    stamps = _dates(rows, path)
    points = []
    for i, (r, ts) in enumerate(zip(rows, stamps), start=2):
        o = _parse_float(r[io_], i, "open", path)
        c = _parse_float(r[ic], i, "close", path)
        if o <= 0 or c <= 0:
            raise DataError(f"{path}: row {i}: non-positive price at {r[0]}")
        points.append(PricePoint(ts, o, c))
    if frequency is None:
        frequency = "hourly" if stamps and isinstance(stamps[0], datetime) else "daily"
    return PriceSeries(tuple(points), frequency)


def load_features(path) -> FeatureMatrix:
    header, rows = _read_rows(path)
    names = header[1:]
    if not names:
        raise DataError(f"{path}: no feature columns")
    stamps = _dates(rows, path)
    data = np.empty((len(names), len(rows)))
    for i, r in enumerate(rows):
        for j, name in enumerate(names):
            data[j, i] = _parse_float(r[j + 1], i + 2, name, path)
    return FeatureMatrix(names, data, stamps)


def load_dataset(price_csv, feature_csv, frequency: str | None = None) -> tuple[PriceSeries, FeatureMatrix]:
    prices = load_prices(price_csv, frequency)
    feats = load_features(feature_csv)
    price_set, feat_set = set(prices.timestamps), set(feats.timestamps)
    for ts in prices.timestamps:
        if ts not in feat_set:
            raise DataError(f"{feature_csv}: missing date {_format_stamp(ts)}")
    for ts in feats.timestamps:
        if ts not in price_set:
            raise DataError(f"{price_csv}: missing date {_format_stamp(ts)}")
    if feats.timestamps != prices.timestamps:
        raise DataError(f"{feature_csv}: rows are not in the same order as {price_csv}")
    return prices, feats


def write_prices(prices: PriceSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "open", "close"])
        for p in prices.points:
            w.writerow([_format_stamp(p.timestamp), repr(p.open), repr(p.close)])


def write_features(X: FeatureMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *X.names])
        for t, ts in enumerate(X.timestamps):
            w.writerow([_format_stamp(ts), *(repr(float(v)) for v in X.data[:, t])])
