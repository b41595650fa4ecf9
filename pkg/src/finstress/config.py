"""Run configuration: a JSON document with a ``schema_version`` field."""

from __future__ import annotations

import copy
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import SyntheticSpec
from .errors import ConfigError
from .forecaster import PARAM_NAMES, TrainConfig
from .stress import DIRECTIONS, PerturbationSpec
from .timeseries import SplitSpec, WindowSpec
from .trading import StrategySpec

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "data": {"synthetic": {}},
    "frequency": "daily",
    "window": {"history_len": 5, "horizon": 1},
    "lag": 1,
    "split": "auto",
    "train": {
        "hidden_size": 32,
        "learning_rate": 0.05,
        "epochs": 300,
        "patience": 30,
        "weight_decay": 0.3,
        "dropout": 0.0,
        "batch_size": 0,
        "clip_norm": 10.0,
    },
    "strategies": ["t0", "t0,kelly", "t-musigma", "t-musigma,kelly"],
    "strategy_window": None,
    "stress": {"params": list(PARAM_NAMES), "directions": ["up", "down"], "epsilon": 0.03, "iterations": 1},
    "sweep": {"param": "mu", "direction": "up", "epsilons": [0.0, 0.01, 0.03, 0.1], "iterations": 1},
    "bounds_override": None,
    "crps_samples": 200,
    "out": "runs/default",
}


def derive_seed(master: int, label: str) -> int:
    """Independent, reproducible 63-bit seed for a named component."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(label.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "data":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    seed: int
    synthetic: SyntheticSpec | None
    price_csv: Path | None
    feature_csv: Path | None
    frequency: str
    window: WindowSpec
    lag: int
    split: SplitSpec | None
    train: TrainConfig
    strategies: tuple[StrategySpec, ...]
    stress_specs: tuple[PerturbationSpec, ...]
    sweep_template: dict | None
    sweep_epsilons: tuple[float, ...]
    bounds_override: tuple[float, float] | None
    crps_samples: int
    out: Path
    base_dir: Path = field(default=Path("."))

    def to_dict(self) -> dict:
        d = copy.deepcopy(self.raw)
        d["seed"] = self.seed
        d["out"] = str(self.out)
        return d


def build_config(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    raw = _merge(DEFAULTS, raw)
    base_dir = Path(base_dir)
    try:
        if raw["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {raw['schema_version']!r}")
        seed = int(raw["seed"])
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        freq = raw["frequency"]
        if freq not in ("daily", "hourly"):
            raise ConfigError(f"frequency must be daily or hourly, got {freq!r}")

        data = raw["data"]
        synthetic = price_csv = feature_csv = None
        if "synthetic" in data:
            syn = dict(data["synthetic"] or {})
            syn.setdefault("seed", derive_seed(seed, "synthetic"))
            syn.setdefault("frequency", freq)
            synthetic = SyntheticSpec(**syn)
        elif "prices" in data and "features" in data:
            price_csv = (base_dir / data["prices"]).resolve()
            feature_csv = (base_dir / data["features"]).resolve()
            for p in (price_csv, feature_csv):
                if not p.exists():
                    raise ConfigError(f"data file not found: {p}")
        else:
            raise ConfigError("data needs either 'synthetic' or both 'prices' and 'features'")

        window = WindowSpec(**raw["window"])
        lag = int(raw["lag"])
        split = None
        if raw["split"] != "auto":
            s = raw["split"]
            split = SplitSpec(tuple(s["train"]), tuple(s["valid"]), tuple(s["test"]))

        train_kw = dict(raw["train"])
        train_kw["seed"] = derive_seed(seed, "train")
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(train_kw) - known
        if unknown:
            raise ConfigError(f"unknown train options: {sorted(unknown)}")
        train = TrainConfig(**train_kw)

        sw = raw["strategy_window"] or max(2, window.history_len)
        strategies = tuple(StrategySpec.parse(s, sw) for s in raw["strategies"])

        st = raw["stress"]
        specs = tuple(
            PerturbationSpec(p, d, float(st["epsilon"]), int(st["iterations"]))
            for p in st["params"]
            for d in st["directions"]
        )
        sweep = raw["sweep"]
        template, eps = None, ()
        if sweep:
            if sweep["param"] not in PARAM_NAMES or sweep["direction"] not in DIRECTIONS:
                raise ConfigError(f"bad sweep parameter/direction: {sweep}")
            template = {"p": sweep["param"], "d": sweep["direction"], "iterations": int(sweep["iterations"])}
            eps = tuple(float(e) for e in sweep["epsilons"])
            if not eps or any(b < a for a, b in zip(eps, eps[1:])) or eps[0] < 0:
                raise ConfigError("sweep epsilons must be a non-empty ascending list of non-negative values")
        override = raw["bounds_override"]
        if override is not None:
            override = (float(override[0]), float(override[1]))
        crps_samples = int(raw["crps_samples"])
        if crps_samples < 2:
            raise ConfigError("crps_samples must be >= 2")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    return RunConfig(
        raw=raw,
        seed=seed,
        synthetic=synthetic,
        price_csv=price_csv,
        feature_csv=feature_csv,
        frequency=freq,
        window=window,
        lag=lag,
        split=split,
        train=train,
        strategies=strategies,
        stress_specs=specs,
        sweep_template=template,
        sweep_epsilons=eps,
        bounds_override=override,
        crps_samples=crps_samples,
        out=Path(raw["out"]),
        base_dir=base_dir,
    )


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.parent
    return build_config(_merge(raw, overrides or {}), base)
