"""Threshold trading strategies, Kelly sizing and the daily backtest ledger.

Each period starts and ends in cash: when the forecast clears the
threshold, a fraction ``f`` of capital buys at the open and sells at the
close, so the period's capital factor is ``1 + f * (close / open - 1)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .timeseries import PriceSeries, target_to_return

THRESHOLDS = ("fixed_zero", "rolling_mean_plus_std")
SIZINGS = ("full", "kelly")


@dataclass(frozen=True)
class StrategySpec:
    threshold: str = "fixed_zero"
    sizing: str = "full"
    window: int = 5

    def __post_init__(self):
        if self.threshold not in THRESHOLDS:
            raise ValueError(f"unknown threshold kind {self.threshold!r}")
        if self.sizing not in SIZINGS:
            raise ValueError(f"unknown sizing {self.sizing!r}")
        if (self.threshold != "fixed_zero" or self.sizing == "kelly") and self.window < 2:
            raise ValueError("rolling window must be >= 2")

    @property
    def name(self) -> str:
        base = "t0" if self.threshold == "fixed_zero" else "t-musigma"
        return f"{base},kelly" if self.sizing == "kelly" else base

    @classmethod
    def parse(cls, text: str, window: int = 5) -> "StrategySpec":
        """Parse CLI notation such as ``t0``, ``t-musigma`` or ``t0,kelly``."""
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kinds = {"t0": "fixed_zero", "t-musigma": "rolling_mean_plus_std"}
        if not parts or parts[0] not in kinds or any(p != "kelly" for p in parts[1:]):
            raise ValueError(f"cannot parse strategy {text!r}")
        return cls(kinds[parts[0]], "kelly" if "kelly" in parts[1:] else "full", window)


@dataclass(frozen=True)
class TradeRecord:
    timestamp: object
    traded: bool
    fraction: float
    forecast: float
    realized_return: float
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if not self.traded and self.fraction != 0.0:
            raise ValueError("skipped periods carry a zero fraction")


@dataclass(frozen=True)
class BacktestReport:
    strategy: StrategySpec
    records: tuple[TradeRecord, ...]
    compounded_return: float  # percent
    percent_traded: float
    mean_traded_return: float  # percent; nan when nothing traded
    returns: tuple[float, ...] = field(default=())  # realized y of traded periods

    @property
    def factors(self) -> np.ndarray:
        return np.array([1.0 + r.fraction * r.realized_return for r in self.records])

    def summary(self) -> dict:
        return {
            "strategy": self.strategy.name,
            "compounded_return_pct": self.compounded_return,
            "percent_traded": self.percent_traded,
            "mean_traded_return_pct": None if math.isnan(self.mean_traded_return) else self.mean_traded_return,
            "n_periods": len(self.records),
            "n_traded": len(self.returns),
        }


def rolling_threshold(past_returns: Sequence[float]) -> float:
    """Mean plus sample standard deviation of the trailing realized returns."""
    past = [float(v) for v in past_returns]
    k = len(past)
    if k < 2:
        raise ValueError("need at least 2 past returns")
    m = sum(past) / k
    return m + math.sqrt(sum((v - m) ** 2 for v in past) / (k - 1))


def kelly_fraction(W: float, R: float) -> float:
    """``W - (1 - W) / R`` clamped to [0, 1]."""
    if not 0.0 <= W <= 1.0:
        raise ValueError("win rate must lie in [0, 1]")
    if not R > 0:
        raise ValueError("gain/loss ratio must be positive")
    return min(1.0, max(0.0, W - (1.0 - W) / R))


def kelly_from_trades(trades: Sequence[float]) -> tuple[float, str | None]:
    """Kelly fraction from past trade returns, plus a flag when it falls back to full size.

    Win rate is the share of strictly positive trades; the gain/loss ratio is
    mean gain over mean absolute loss.
    """
    wins = [y for y in trades if y > 0]
    losses = [y for y in trades if y < 0]
    if not losses:
        return 1.0, "kelly_no_losses"
    if not wins:
        return 0.0, None
    W = len(wins) / len(trades)
    R = (sum(wins) / len(wins)) / (-sum(losses) / len(losses))
    return kelly_fraction(W, R), None


def decide(forecast: float, threshold: float) -> bool:
    return bool(forecast >= threshold)


def backtest(
    forecasts: Sequence[float],
    prices: PriceSeries,
    strategy: StrategySpec,
    prior_returns: Sequence[float] = (),
) -> BacktestReport:
    """Replay ``strategy`` over aligned forecasts and prices.

    ``forecasts`` are mean log-returns per period. ``prior_returns`` are
    realized returns preceding the first period, used to seed the rolling
    threshold.
    """
    mu = np.asarray(forecasts, dtype=float)
    if mu.ndim != 1 or len(mu) != len(prices):
        raise DataError(f"{len(mu)} forecasts for {len(prices)} price periods")
    realized = prices.closes / prices.opens - 1.0
    forecast_ret = target_to_return(mu)
    history = list(prior_returns)
    own_trades: list[float] = []
    records = []
    factor = 1.0
    for ts, f_hat, y in zip(prices.timestamps, forecast_ret, realized):
        flags = []
        if strategy.threshold == "fixed_zero":
            thr = 0.0
        elif len(history) >= strategy.window:
            thr = rolling_threshold(history[-strategy.window :])
        else:
            thr = None
            flags.append("insufficient_history")
        trade = thr is not None and decide(f_hat, thr)
        frac = 0.0
        if trade:
            frac = 1.0
            if strategy.sizing == "kelly":
                if len(own_trades) >= strategy.window:
                    frac, flag = kelly_from_trades(own_trades[-strategy.window :])
                    if flag:
                        flags.append(flag)
                else:
                    flags.append("kelly_warmup")
            own_trades.append(float(y))
            factor *= 1.0 + frac * y
        records.append(TradeRecord(ts, trade, frac, float(f_hat), float(y), tuple(flags)))
        history.append(float(y))
    traded = [r.realized_return for r in records if r.traded]
    n = len(records)
    return BacktestReport(
        strategy,
        tuple(records),
        (factor - 1.0) * 100.0,
        100.0 * len(traded) / n if n else 0.0,
        100.0 * float(np.mean(traded)) if traded else float("nan"),
        tuple(traded),
    )


def passive_return(prices: PriceSeries) -> float:
    """Buy at the first open, sell at the last close; percent."""
    return (prices.points[-1].close / prices.points[0].open - 1.0) * 100.0


def write_ledger(report: BacktestReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "decision", "fraction", "forecast", "realized_return", "cumulative_factor"])
        cum = 1.0
        for r in report.records:
            cum *= 1.0 + r.fraction * r.realized_return
            stamp = r.timestamp.isoformat() if hasattr(r.timestamp, "isoformat") else str(r.timestamp)
            w.writerow([stamp, "trade" if r.traded else "skip", repr(r.fraction), repr(r.forecast), repr(r.realized_return), repr(cum)])
