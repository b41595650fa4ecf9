"""End-to-end orchestration: data -> model -> forecasts -> strategies -> stress -> reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, derive_seed
from .data import generate_synthetic, load_dataset
from .errors import DataError, FinstressError
from .forecaster import Forecaster, TrainLog, fit_forecaster, load_checkpoint, save_checkpoint
from .metrics import MetricReport, metric_report, return_kde
from .stress import FeatureBounds, PerturbationSpec, StressResult, perturb, perturbation_norms, sweep
from .timeseries import (
    FeatureMatrix,
    FeatureStats,
    PriceSeries,
    SplitSpec,
    TargetSeries,
    Window,
    apply_split,
    lag_covariates,
    log_diff_transform,
    make_windows,
    standardize_features,
)
from .trading import BacktestReport, backtest, passive_return, write_ledger

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class StageError(FinstressError):
    """A pipeline stage failed; carries the exit code of the underlying error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


@dataclass(frozen=True)
class Prepared:
    prices: PriceSeries
    features: FeatureMatrix
    target: TargetSeries
    split: SplitSpec
    stats: FeatureStats
    covariates: FeatureMatrix  # standardized and lagged
    train_windows: list[Window]
    valid_windows: list[Window]
    test_windows: list[Window]
    bounds: FeatureBounds


def prepare(cfg: RunConfig) -> Prepared:
    if cfg.synthetic is not None:
        prices, features, _ = generate_synthetic(cfg.synthetic)
    else:
        prices, features = load_dataset(cfg.price_csv, cfg.feature_csv, cfg.frequency)
    target = log_diff_transform(prices)
    w = cfg.window
    split = cfg.split or apply_split(len(prices), prices.frequency, w.history_len + w.horizon)
    if split.test[1] > len(prices):
        raise DataError(f"split {split} exceeds series length {len(prices)}")
    standardized, stats = standardize_features(features, split)
    covariates = lag_covariates(standardized, cfg.lag)
    windows = {name: make_windows(target, covariates, w, split.range(name)) for name in ("train", "valid", "test")}
    for name, ws in windows.items():
        if not ws:
            raise DataError(f"{name} split {split.range(name)} yields no windows for {w}")
    bounds = FeatureBounds.from_stats(stats, cfg.bounds_override)
    return Prepared(prices, features, target, split, stats, covariates, windows["train"], windows["valid"], windows["test"], bounds)


def train_model(cfg: RunConfig, prep: Prepared) -> tuple[Forecaster, TrainLog]:
    return fit_forecaster(prep.train_windows, prep.valid_windows, cfg.train)


# evaluation ------------------------------------------------------------------


@dataclass
class Evaluation:
    setting: str
    metrics: MetricReport
    backtests: list[BacktestReport]
    mu: np.ndarray


def _test_days(prep: Prepared, windows: Sequence[Window]) -> tuple[PriceSeries, list[float]]:
    """Prices of the forecast (first horizon) days and the realized returns preceding them within the test split."""
    first = windows[0].anchor + 1
    last = windows[-1].anchor + 1
    start = prep.split.test[0]
    opens, closes = prep.prices.opens, prep.prices.closes
    prior = closes[start:first] / opens[start:first] - 1.0
    return prep.prices.slice(first, last + 1), prior.tolist()


def evaluate(
    setting: str,
    theta: np.ndarray,
    prep: Prepared,
    windows: Sequence[Window],
    strategies: Sequence,
    crps_samples: int,
    seed: int,
) -> Evaluation:
    """Score first-step forecasts ``theta`` (B x horizon x 3) and backtest every strategy on them."""
    mu, sigma, nu = theta[:, 0, 0], theta[:, 0, 1], theta[:, 0, 2]
    y = np.array([w.z_future[0] for w in windows])
    rng = np.random.default_rng(seed)
    samples = [m + s * rng.standard_t(n, size=crps_samples) for m, s, n in zip(mu, sigma, nu)]
    metrics = metric_report(y, mu, samples)
    days, prior = _test_days(prep, windows)
    reports = [backtest(mu, days, s, prior) for s in strategies]
    return Evaluation(setting, metrics, reports, mu)


def run_stress(model: Forecaster, prep: Prepared, spec: PerturbationSpec) -> list[StressResult]:
    return [perturb(model, w.z_history, w.x_history, spec, prep.bounds, w.anchor) for w in prep.test_windows]


def _theta_hat(results: Sequence[StressResult]) -> np.ndarray:
    return np.stack([r.theta_perturbed.theta for r in results])


# report emission -------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: non-finite floats become None."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def table_row(ev: Evaluation, passive: float, parameter: str | None = None, direction: str | None = None) -> dict:
    m = ev.metrics
    return {
        "set": "test" if parameter is None else "synthetic",
        "parameter": parameter,
        "direction": direction,
        "rmse": m.rmse,
        "mape": m.mape,
        "crps": m.crps,
        "T": m.baseline_accuracy,
        "P": m.accuracy,
        "passive": passive,
        "returns": {b.strategy.name: b.compounded_return for b in ev.backtests},
        "percent_traded": {b.strategy.name: b.percent_traded for b in ev.backtests},
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _slug(text: str) -> str:
    return text.replace(",", "_").replace("-", "_")


def emit_report(
    out: Path,
    summary: dict,
    evaluations: Sequence[Evaluation] = (),
    stress_sets: dict[str, list[StressResult]] | None = None,
    kde_sets: Sequence[tuple[str, str, np.ndarray]] = (),
) -> list[Path]:
    """Write summary.json plus ledgers, stress records, perturbation log and KDE grid; return written paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = dict(summary)
    summary["schema_version"] = REPORT_SCHEMA_VERSION
    summary.setdefault("metadata", {})["generated_at"] = datetime.now(timezone.utc).isoformat()
    try:
        p = out / "summary.json"
        _write_json(p, summary)
        written.append(p)
        for ev in evaluations:
            for rep in ev.backtests:
                p = out / f"ledger_{_slug(ev.setting)}_{_slug(rep.strategy.name)}.csv"
                write_ledger(rep, p)
                written.append(p)
        if stress_sets:
            for setting, results in stress_sets.items():
                p = out / f"stress_{_slug(setting)}.json"
                _write_json(p, {"setting": setting, "results": [r.to_dict() for r in results]})
                written.append(p)
            p = out / "perturbation_log.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["setting", "anchor", "iteration", "t", "s", "feature", "delta"])
                for setting, results in stress_sets.items():
                    for r in results:
                        for e in r.log:
                            w.writerow([setting, r.anchor, e.iteration, e.horizon_step, e.history_step, e.feature, repr(e.delta)])
            written.append(p)
        if kde_sets:
            p = out / "kde.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["setting", "strategy", "bandwidth", "x", "density"])
                for setting, strategy, returns in kde_sets:
                    if len(returns) < 2:
                        continue
                    curve = return_kde(returns)
                    for x, d in zip(curve.grid, curve.density):
                        w.writerow([setting, strategy, repr(curve.bandwidth), repr(float(x)), repr(float(d))])
            written.append(p)
    except OSError as exc:
        raise OSError(f"failed writing report to {out}: {exc}") from exc
    return written


# orchestration ---------------------------------------------------------------


def _stage(name: str, fn: Callable, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _commit(tmp: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(tmp.iterdir()):
        target = out / item.name
        if target.exists():
            target.unlink()
        shutil.move(str(item), str(target))
    tmp.rmdir()


def run_pipeline(cfg: RunConfig, out: Path | None = None) -> dict:
    """Execute every stage; artifacts land in ``out`` only if all stages succeed."""
    out = Path(out or cfg.out)
    tmp = out.parent / f".{out.name}.partial"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        summary = _run_into(cfg, tmp)
        _commit(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return summary


def _run_into(cfg: RunConfig, out: Path) -> dict:
    prep = _stage("prepare", prepare, cfg)
    model, train_log = _stage("train", train_model, cfg, prep)
    save_checkpoint(model, out / "model.json", {"feature_stats": prep.stats.to_dict()})
    (out / "train_log.json").write_text(json.dumps(_clean(train_log.to_dict()), indent=2, sort_keys=True) + "\n")

    eval_seed = derive_seed(cfg.seed, "crps")
    test_prices = prep.prices.slice(*prep.split.test)
    passive = passive_return(test_prices)

    def regular():
        theta = model.forecast_windows(prep.test_windows)
        return evaluate("regular", theta, prep, prep.test_windows, cfg.strategies, cfg.crps_samples, eval_seed)

    base = _stage("forecast", regular)
    evaluations = [base]
    rows = [table_row(base, passive)]
    stress_sets: dict[str, list[StressResult]] = {}
    kde_sets = [("regular", b.strategy.name, np.array(b.returns)) for b in base.backtests]

    for spec in cfg.stress_specs:
        setting = f"{spec.param_name}-{spec.direction_name}"
        results = _stage(f"stress {setting}", run_stress, model, prep, spec)
        ev = _stage(
            f"backtest {setting}",
            evaluate,
            setting,
            _theta_hat(results),
            prep,
            prep.test_windows,
            cfg.strategies,
            cfg.crps_samples,
            eval_seed,
        )
        stress_sets[setting] = results
        evaluations.append(ev)
        rows.append(table_row(ev, passive, spec.param_name, spec.direction_name))

    sweep_rows = []
    if cfg.sweep_template is not None:
        swept = _stage(
            "sweep", sweep, model, prep.test_windows, cfg.sweep_template, cfg.sweep_epsilons, prep.bounds
        )
        for eps, results in swept.items():
            tpl = cfg.sweep_template
            setting = f"sweep-{tpl['p']}-{tpl['d']}-eps{eps:g}"
            ev = _stage(
                f"backtest {setting}",
                evaluate,
                setting,
                _theta_hat(results),
                prep,
                prep.test_windows,
                cfg.strategies,
                cfg.crps_samples,
                eval_seed,
            )
            if eps > 0:
                stress_sets[setting] = results
            evaluations.append(ev)
            kde_sets.extend((setting, b.strategy.name, np.array(b.returns)) for b in ev.backtests)
            l1 = [perturbation_norms(r)[0] for r in results]
            sweep_rows.append(
                {
                    "epsilon": eps,
                    "mean_l1": float(np.mean(l1)),
                    "metrics": ev.metrics.to_dict(),
                    "backtests": [b.summary() for b in ev.backtests],
                }
            )

    summary = {
        "config": {k: v for k, v in cfg.to_dict().items() if k != "out"},
        "metadata": {"version": __version__},
        "data": {
            "length": len(prep.prices),
            "frequency": prep.prices.frequency,
            "features": list(prep.features.names),
            "zero_variance_features": [n for n, z in zip(prep.features.names, prep.stats.zero_variance) if z],
        },
        "split": prep.split.to_dict(),
        "training": {
            "best_epoch": train_log.best_epoch,
            "epochs_run": len(train_log.epochs),
            "initial_valid_nll": train_log.initial_valid_nll,
            "best_valid_nll": train_log.best_valid_nll,
        },
        "passive_return_pct": passive,
        "metrics": base.metrics.to_dict(),
        "backtests": [b.summary() for b in base.backtests],
        "table": rows,
        "sweep": sweep_rows,
    }
    _stage("report", emit_report, out, summary, evaluations, stress_sets, kde_sets)
    return summary


def load_model(path: Path) -> Forecaster:
    model, _ = load_checkpoint(path)
    return model
