import csv
import hashlib
import json
from pathlib import Path

import pytest

from finstress import pipeline
from finstress.cli import main
from finstress.config import build_config, derive_seed, load_config
from finstress.data import SyntheticSpec, generate_synthetic, write_features, write_prices
from finstress.errors import ConfigError

TINY = {
    "seed": 3,
    "data": {"synthetic": {"length": 300, "n_features": 4}},
    "train": {"hidden_size": 8, "epochs": 5},
    "crps_samples": 20,
    "sweep": {"param": "mu", "direction": "up", "epsilons": [0.01, 0.03, 0.1], "iterations": 1},
}


def _config_file(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def snapshot(out: Path) -> dict:
    """File name -> bytes, with the one timestamp field removed from summary.json."""
    files = {}
    for f in sorted(out.iterdir()):
        data = f.read_bytes()
        if f.name == "summary.json":
            doc = json.loads(data)
            doc["metadata"].pop("generated_at")
            data = json.dumps(doc, sort_keys=True).encode()
        files[f.name] = data
    return files


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    summary = pipeline.run_pipeline(build_config(TINY), out)
    return out, summary


def test_smoke_run_emits_all_reports(tiny_run):
    out, _ = tiny_run
    names = {f.name for f in out.iterdir()}
    assert {"summary.json", "model.json", "train_log.json", "perturbation_log.csv", "kde.csv"} <= names
    assert "ledger_regular_t0.csv" in names and "ledger_sigma_down_t_musigma_kelly.csv" in names
    assert "stress_mu_up.json" in names
    assert not any(n.startswith(".") for n in names)


def test_table_rows(tiny_run):
    _, summary = tiny_run
    rows = summary["table"]
    assert rows[0]["set"] == "test" and rows[0]["parameter"] is None
    synthetic = [r for r in rows if r["set"] == "synthetic"]
    assert len(synthetic) == 6
    assert {(r["parameter"], r["direction"]) for r in synthetic} == {(p, d) for p in ("mu", "sigma", "nu") for d in ("up", "down")}
    assert set(rows[0]["returns"]) == {"t0", "t0,kelly", "t-musigma", "t-musigma,kelly"}


def test_sweep_produces_three_stress_sets(tiny_run):
    out, summary = tiny_run
    assert [r["epsilon"] for r in summary["sweep"]] == [0.01, 0.03, 0.1]
    sweep_files = sorted(f.name for f in out.glob("stress_sweep*.json"))
    assert len(sweep_files) == 3
    l1 = [r["mean_l1"] for r in summary["sweep"]]
    assert l1 == sorted(l1)


def test_summary_round_trip(tiny_run):
    out, summary = tiny_run
    doc = json.loads((out / "summary.json").read_text())
    assert doc["schema_version"] == 1
    for key in ("table", "sweep", "metrics", "backtests", "split", "training", "config"):
        assert doc[key] == json.loads(json.dumps(pipeline._clean(summary[key])))


def test_ledger_matches_summary(tiny_run):
    out, summary = tiny_run
    rows = list(csv.DictReader((out / "ledger_regular_t0.csv").open()))
    t0 = next(b for b in summary["backtests"] if b["strategy"] == "t0")
    assert float(rows[-1]["cumulative_factor"]) == pytest.approx(1 + t0["compounded_return_pct"] / 100, rel=1e-12)
    assert len(rows) == t0["n_periods"]


def test_saved_model_reproduces_forecasts(tiny_run):
    out, _ = tiny_run
    model = pipeline.load_model(out / "model.json")
    prep = pipeline.prepare(build_config(TINY))
    theta = model.forecast_windows(prep.test_windows)
    assert theta.shape == (len(prep.test_windows), 1, 3)


def test_byte_identical_reruns(tiny_run, tmp_path):
    out, _ = tiny_run
    pipeline.run_pipeline(build_config(TINY), tmp_path / "b")
    assert snapshot(out) == snapshot(tmp_path / "b")


def test_seed_changes_output(tiny_run, tmp_path):
    out, _ = tiny_run
    pipeline.run_pipeline(build_config({**TINY, "seed": 4}), tmp_path / "c")
    assert snapshot(out)["model.json"] != snapshot(tmp_path / "c")["model.json"]


def test_empty_strategy_list(tmp_path):
    summary = pipeline.run_pipeline(build_config({**TINY, "strategies": [], "sweep": None}), tmp_path / "d")
    assert not list((tmp_path / "d").glob("ledger_*"))
    assert summary["backtests"] == [] and summary["metrics"]["rmse"] >= 0


def test_derive_seed_is_stable_and_label_specific():
    assert derive_seed(0, "train") == derive_seed(0, "train")
    assert derive_seed(0, "train") != derive_seed(0, "synthetic") != derive_seed(1, "synthetic")
    assert 0 <= derive_seed(2**64 - 1, "x") < 2**63


@pytest.mark.parametrize(
    "raw",
    [
        {"schema_version": 2},
        {"frequency": "weekly"},
        {"train": {"hiden_size": 3}},
        {"strategies": ["t1"]},
        {"sweep": {"param": "mu", "direction": "up", "epsilons": [0.1, 0.01], "iterations": 1}},
        {"data": {"prices": "nope.csv", "features": "nope.csv"}},
        {"data": {}},
        {"crps_samples": 1},
    ],
)
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        build_config(raw)


# CLI ---------------------------------------------------------------------------


def test_cli_run_and_report(tmp_path, capsys):
    cfg = _config_file(tmp_path, TINY)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--epsilon", "0.01,0.1", "--param", "mu", "--direction", "up"]) == 0
    doc = json.loads((out / "summary.json").read_text())
    assert [r["epsilon"] for r in doc["sweep"]] == [0.01, 0.1]
    assert len(doc["table"]) == 2  # regular + mu-up
    capsys.readouterr()
    assert main(["report", "--out", str(out), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out) == doc["table"]
    assert main(["report", "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("set\tparam")


def test_cli_subcommands(tmp_path):
    cfg = _config_file(tmp_path, TINY)
    out = tmp_path / "w"
    assert main(["simulate-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "prices.csv").exists() and (out / "features.csv").exists()
    assert main(["backtest", "--config", str(cfg), "--out", str(out)]) == 2  # no model yet
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["backtest", "--config", str(cfg), "--out", str(out), "--strategy", "t0"]) == 0
    assert [f.name for f in sorted((out / "backtest").glob("ledger_*"))] == ["ledger_regular_t0.csv"]
    assert main(["stress", "--config", str(cfg), "--out", str(out), "--param", "nu", "--iterations", "2"]) == 0
    assert {f.name for f in (out / "stress").glob("stress_*")} == {"stress_nu_up.json", "stress_nu_down.json"}


def _csv_dataset(tmp_path, corrupt=False):
    prices, X, _ = generate_synthetic(SyntheticSpec(length=200, n_features=2, seed=1))
    write_prices(prices, tmp_path / "prices.csv")
    write_features(X, tmp_path / "features.csv")
    if corrupt:
        lines = (tmp_path / "features.csv").read_text().splitlines()
        cells = lines[5].split(",")
        cells[1] = "abc"
        lines[5] = ",".join(cells)
        (tmp_path / "features.csv").write_text("\n".join(lines) + "\n")
    raw = {**TINY, "data": {"prices": "prices.csv", "features": "features.csv"}}
    return _config_file(tmp_path, raw)


def _digest(paths):
    return [hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths]


def test_cli_csv_inputs_untouched(tmp_path):
    cfg = _csv_dataset(tmp_path)
    inputs = [tmp_path / "prices.csv", tmp_path / "features.csv"]
    before = _digest(inputs)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    assert _digest(inputs) == before


def test_exit_codes_and_cleanup(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", str(_config_file(tmp_path, {"strategies": ["t9"]}, "s.json"))]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2

    sub = tmp_path / "corrupt"
    sub.mkdir()
    cfg = _csv_dataset(sub, corrupt=True)
    assert main(["run", "--config", str(cfg), "--out", str(sub / "out")]) == 3

    diverge = {**TINY, "train": {"hidden_size": 4, "epochs": 5, "learning_rate": 1e300, "clip_norm": 1e308, "weight_decay": 0.0}}
    out = tmp_path / "div"
    with pytest.warns(RuntimeWarning):
        code = main(["run", "--config", str(_config_file(tmp_path, diverge, "d.json")), "--out", str(out)])
    assert code == 4
    assert not out.exists() and not (tmp_path / ".div.partial").exists()


def test_error_message_names_stage(tmp_path, capsys):
    sub = tmp_path / "c"
    sub.mkdir()
    cfg = _csv_dataset(sub, corrupt=True)
    main(["run", "--config", str(cfg), "--out", str(sub / "out")])
    err = capsys.readouterr().err
    assert "prepare" in err and "row 6" in err


def test_load_config_overrides(tmp_path):
    cfg = load_config(_config_file(tmp_path, TINY), {"seed": 9, "stress": {"epsilon": 0.2}})
    assert cfg.seed == 9 and all(s.epsilon == 0.2 for s in cfg.stress_specs)
    assert cfg.train.hidden_size == 8
