"""Command-line entry point.

Subcommands: simulate-data, train, backtest, stress, run, report.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, derive_seed, load_config
from .data import generate_synthetic, write_features, write_prices
from .errors import ConfigError, FinstressError
from .forecaster import PARAM_NAMES, save_checkpoint

log = logging.getLogger("finstress")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--epsilon", type=_float_list, help="comma-separated perturbation sizes")
    p.add_argument("--param", choices=PARAM_NAMES, help="distribution parameter to push")
    p.add_argument("--direction", choices=("up", "down"))
    p.add_argument("--iterations", type=int, help="perturbation iterations R")
    p.add_argument("--strategy", action="append", help="t0 | t-musigma, optionally suffixed ,kelly (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finstress", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate-data", "write synthetic prices.csv and features.csv"),
        ("train", "train the forecaster and save model.json"),
        ("backtest", "forecast the test split with a saved model and backtest the strategies"),
        ("stress", "perturb test windows with a saved model"),
        ("run", "end-to-end pipeline"),
    ):
        _common(sub.add_parser(name, help=help_))
    rp = sub.add_parser("report", help="print the result table of a finished run")
    rp.add_argument("--out", type=Path, required=True)
    rp.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = str(args.out)
    if args.strategy:
        over["strategies"] = args.strategy
    stress: dict = {}
    if args.param:
        stress["params"] = [args.param]
    if args.direction:
        stress["directions"] = [args.direction]
    if args.iterations is not None:
        stress["iterations"] = args.iterations
    if args.epsilon:
        stress["epsilon"] = args.epsilon[0]
    if stress:
        over["stress"] = stress
    sweep: dict = {}
    if args.epsilon:
        sweep["epsilons"] = args.epsilon
    if args.param:
        sweep["param"] = args.param
    if args.direction:
        sweep["direction"] = args.direction
    if args.iterations is not None:
        sweep["iterations"] = args.iterations
    if sweep:
        over["sweep"] = sweep
    return over


def _simulate(cfg: RunConfig) -> None:
    if cfg.synthetic is None:
        raise ConfigError("simulate-data needs a synthetic data section")
    prices, features, _ = generate_synthetic(cfg.synthetic)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_prices(prices, cfg.out / "prices.csv")
    write_features(features, cfg.out / "features.csv")
    print(f"wrote {len(prices)} rows to {cfg.out}")


def _train(cfg: RunConfig) -> None:
    prep = pipeline._stage("prepare", pipeline.prepare, cfg)
    model, train_log = pipeline._stage("train", pipeline.train_model, cfg, prep)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, cfg.out / "model.json", {"feature_stats": prep.stats.to_dict()})
    (cfg.out / "train_log.json").write_text(json.dumps(pipeline._clean(train_log.to_dict()), indent=2) + "\n")
    print(f"best epoch {train_log.best_epoch}, validation NLL {train_log.best_valid_nll:.6f}")


def _saved_model(cfg: RunConfig):
    path = cfg.out / "model.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'train' first")
    return pipeline.load_model(path)


def _backtest(cfg: RunConfig) -> None:
    prep = pipeline._stage("prepare", pipeline.prepare, cfg)
    model = _saved_model(cfg)
    theta = model.forecast_windows(prep.test_windows)
    ev = pipeline.evaluate("regular", theta, prep, prep.test_windows, cfg.strategies, cfg.crps_samples, derive_seed(cfg.seed, "crps"))
    summary = {"metrics": ev.metrics.to_dict(), "backtests": [b.summary() for b in ev.backtests]}
    pipeline.emit_report(cfg.out / "backtest", summary, [ev])
    for b in ev.backtests:
        print(f"{b.strategy.name:18s} return {b.compounded_return:8.3f}%  traded {b.percent_traded:5.1f}%")


def _stress(cfg: RunConfig) -> None:
    prep = pipeline._stage("prepare", pipeline.prepare, cfg)
    model = _saved_model(cfg)
    sets = {}
    for spec in cfg.stress_specs:
        sets[f"{spec.param_name}-{spec.direction_name}"] = pipeline.run_stress(model, prep, spec)
    summary = {"stress": {k: len(v) for k, v in sets.items()}}
    pipeline.emit_report(cfg.out / "stress", summary, stress_sets=sets)
    print(f"stressed {len(prep.test_windows)} windows for {len(sets)} settings")


def _run(cfg: RunConfig) -> None:
    summary = pipeline.run_pipeline(cfg)
    print(format_table(summary))


def format_table(summary: dict) -> str:
    rows = summary.get("table", [])
    if not rows:
        return "(no rows)"
    # summary.json stores keys sorted; the backtest list keeps the configured order
    strategies = [b["strategy"] for b in summary.get("backtests", [])] or list(rows[0]["returns"])
    head = ["set", "param", "dir", "RMSE", "MAPE", "CRPS", "T", "P", "Passive", *strategies]
    lines = ["\t".join(head)]
    for r in rows:
        def fmt(v):
            return "-" if v is None else f"{v:.4g}"

        cells = [r["set"], r["parameter"] or "-", r["direction"] or "-"]
        cells += [fmt(r[k]) for k in ("rmse", "mape", "crps", "T", "P", "passive")]
        cells += [fmt(r["returns"][s]) for s in strategies]
        lines.append("\t".join(cells))
    return "\n".join(lines)


def _report(args) -> None:
    path = args.out / "summary.json"
    if not path.exists():
        raise ConfigError(f"{path} not found")
    summary = json.loads(path.read_text())
    print(json.dumps(summary["table"], indent=2) if args.format == "json" else format_table(summary))


COMMANDS = {"simulate-data": _simulate, "train": _train, "backtest": _backtest, "stress": _stress, "run": _run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            _report(args)
        else:
            cfg = load_config(args.config, _overrides(args))
            COMMANDS[args.command](cfg)
    except FinstressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
