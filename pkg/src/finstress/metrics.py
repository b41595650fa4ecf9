"""Point, distributional and directional forecast metrics, plus a return KDE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

CRPS_SAMPLES = 200


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.size == 0 or y.size != y_hat.size:
        raise ValueError(f"need equal non-zero lengths, got {y.size} and {y_hat.size}")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


@dataclass(frozen=True)
class MapeResult:
    value: float | None  # None when every truth is zero
    excluded: int


def mape(y, y_hat) -> MapeResult:
    """Mean absolute percentage error as a fraction; exact-zero truths are excluded and counted."""
    y, y_hat = _pair(y, y_hat)
    keep = y != 0
    if not keep.any():
        return MapeResult(None, int(y.size))
    return MapeResult(float(np.mean(np.abs(y[keep] - y_hat[keep]) / np.abs(y[keep]))), int((~keep).sum()))


def crps_empirical(samples, x: float) -> float:
    """Unbiased CRPS estimate for one observation from m >= 2 forecast samples.

    Uses mean|S - x| - sum_{i != j}|S_i - S_j| / (2 m (m - 1)); the pairwise
    sum is evaluated in O(m log m) from the sorted samples.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    m = s.size
    if m < 2:
        raise ValueError("CRPS needs at least 2 samples")
    term1 = np.mean(np.abs(s - x))
    # sum_{i<j} (s_j - s_i) = sum_j s_j * (2j - m + 1) for 0-based sorted j
    pair_sum = 2.0 * np.sum(s * (2.0 * np.arange(m) - m + 1))
    return float(term1 - pair_sum / (2.0 * m * (m - 1)))


def crps_gaussian(mu: float, sigma: float, x: float) -> float:
    """Closed-form CRPS of N(mu, sigma^2) at x."""
    z = (x - mu) / sigma
    pdf = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    cdf = 0.5 * (1 + math.erf(z / math.sqrt(2)))
    return sigma * (z * (2 * cdf - 1) + 2 * pdf - 1 / math.sqrt(math.pi))


def binary_accuracy(y, y_hat) -> float:
    """Percent of periods where forecast and truth agree on up (> 0) versus not up."""
    y, y_hat = _pair(y, y_hat)
    return float(100.0 * np.mean((y > 0) == (y_hat > 0)))


def historical_baseline(y) -> float:
    """Best accuracy of a constant always-up or always-down forecast, percent."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("empty series")
    up = float(np.mean(y > 0))
    return 100.0 * max(up, 1.0 - up)


@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    point_mass: float | None = None  # set when every input was identical


def silverman_bandwidth(x: np.ndarray) -> float:
    return 1.06 * float(np.std(x, ddof=1)) * x.size ** (-1 / 5)


def return_kde(returns, n_grid: int = 512) -> KdeCurve:
    """Gaussian kernel density on a uniform grid over [min - 3h, max + 3h]."""
    x = np.asarray(returns, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("KDE needs at least 2 returns")
    if np.all(x == x[0]):
        return KdeCurve(np.array([x[0]]), np.array([np.inf]), 0.0, float(x[0]))
    h = silverman_bandwidth(x)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_grid)
    u = (grid[:, None] - x[None, :]) / h
    dens = np.exp(-0.5 * u * u).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))
    return KdeCurve(grid, dens, h)


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    mape: float | None
    mape_excluded: int
    crps: float
    accuracy: float
    baseline_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def metric_report(y, mu, sample_sets: Sequence[np.ndarray]) -> MetricReport:
    """Metrics over test points: ``mu`` are point forecasts, ``sample_sets[i]`` forecast samples for ``y[i]``."""
    y, mu = _pair(y, mu)
    if len(sample_sets) != y.size:
        raise ValueError("one sample set per observation required")
    m = mape(y, mu)
    crps = float(np.mean([crps_empirical(s, v) for s, v in zip(sample_sets, y)]))
    return MetricReport(rmse(y, mu), m.value, m.excluded, crps, binary_accuracy(y, mu), historical_baseline(y))
