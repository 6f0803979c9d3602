import csv
import dataclasses
import json
import warnings
from pathlib import Path

import pytest
import yaml

from esrm import experiment
from esrm.cli import main
from esrm.config import ConfigError, config_from_dict, dump_config, fingerprint, parse_config
from esrm.data import load_dataset
from esrm.experiment import ResultsRecord, emit_plots


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    code = main(["make-toy", str(root), "--image-size", "8", "--train-per-class", "10", "--test-per-class", "3"])
    assert code == 0
    return root


def small_config(root: Path, out: Path, **train) -> dict:
    cfg = yaml.safe_load((root / "config.yaml").read_text())
    cfg["train"].update(
        {"backbone_width": 4, "buffer_capacity": 20, "mem_batch": 8, "augmentation": {"kind": "partial"}}, **train
    )
    cfg["seeds"] = [0, 1]
    cfg["out_dir"] = str(out)
    return cfg


def write_config(path: Path, cfg: dict) -> Path:
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestConfig:
    def test_round_trip(self, toy_root, tmp_path):
        cfg = config_from_dict(small_config(toy_root, tmp_path))
        path = tmp_path / "c.yaml"
        path.write_text(dump_config(cfg))
        assert parse_config(path) == cfg
        assert dump_config(parse_config(path)) == dump_config(cfg)

    def test_defaults(self, toy_root, tmp_path):
        raw = {"data": small_config(toy_root, tmp_path)["data"]}
        cfg = config_from_dict(raw)
        assert cfg.train.stream_batch == 10 and cfg.train.mem_batch == 64
        assert cfg.train.loss_weights.tau == 0.07 and cfg.train.loss_weights.t == 4.0
        assert cfg.train.method == "esrm" and cfg.train.mem_strategy == "es"

    def test_fingerprint(self, toy_root, tmp_path):
        raw = small_config(toy_root, tmp_path)
        a = config_from_dict(raw)
        assert fingerprint(a) == fingerprint(dataclasses.replace(a, out_dir="elsewhere"))
        assert fingerprint(a) != fingerprint(config_from_dict({**raw, "train": {**raw["train"], "lr": 0.01}}))

    @pytest.mark.parametrize(
        "patch,where",
        [
            ({"train": {"lrr": 0.1}}, "train.lrr"),
            ({"train": {"loss_weights": {"gamma": 1.0}}}, "train.loss_weights.gamma"),
            ({"extra": 1}, "extra"),
            ({"train": {"seed": 3}}, "train.seed"),
        ],
    )
    def test_unknown_key_named(self, toy_root, tmp_path, patch, where):
        raw = small_config(toy_root, tmp_path)
        for key, value in patch.items():
            if isinstance(value, dict) and isinstance(raw.get(key), dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        with pytest.raises(ConfigError, match=f"unknown key '{where}'"):
            config_from_dict(raw)

    def test_type_and_value_errors(self, toy_root, tmp_path):
        raw = small_config(toy_root, tmp_path)
        with pytest.raises(ConfigError, match="train.lr"):
            config_from_dict({**raw, "train": {**raw["train"], "lr": "fast"}})
        with pytest.raises(ConfigError, match="data.ratio"):
            config_from_dict({**raw, "data": {**raw["data"], "ratio": 1.5}})
        with pytest.raises(ConfigError, match="seeds"):
            config_from_dict({**raw, "seeds": []})
        with pytest.raises(ConfigError, match="train"):
            config_from_dict({**raw, "train": {**raw["train"], "method": "gem"}})
        with pytest.raises(ConfigError, match="split.coarse_map"):
            config_from_dict({**raw, "split": {"mode": "dil", "n_tasks": 2}})

    def test_missing_path(self, toy_root, tmp_path):
        raw = small_config(toy_root, tmp_path)
        raw["data"]["real_root"] = str(tmp_path / "nope")
        with pytest.raises(ConfigError, match="data.real_root"):
            config_from_dict(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.yaml")


@pytest.fixture(scope="module")
def battery(toy_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("battery")
    path = write_config(out / "cfg.yaml", small_config(toy_root, out / "results"))
    code = main(["run", str(path)])
    return code, out / "results"


class TestRun:
    def test_exit_ok(self, battery):
        assert battery[0] == 0

    def test_results_files(self, battery):
        _, out = battery
        rec = ResultsRecord.read(out)
        assert [r["seed"] for r in rec.runs] == [0, 1]
        assert all(r["status"] == "ok" for r in rec.runs)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["fingerprint"] == rec.fingerprint and summary["n_failed"] == 0
        faa = [r["faa"] for r in rec.runs]
        assert summary["summary"]["faa"]["mean"] == pytest.approx(sum(faa) / 2)
        assert summary["summary"]["faa"]["std"] == pytest.approx(abs(faa[0] - faa[1]) / 2)
        for r in rec.runs:
            assert len(r["accuracy"]) == 5 and 0 <= r["auc"] <= 1
            assert sum(r["diagnostics"]["histogram"]["real"]) + sum(r["diagnostics"]["histogram"]["synthetic"]) == 100
        assert (out / "seed_0" / "model.pt").exists()
        assert not list(out.glob(".*.tmp"))

    def test_record_round_trip(self, battery, tmp_path):
        rec = ResultsRecord.read(battery[1])
        rec.write(tmp_path)
        assert ResultsRecord.read(tmp_path) == rec

    def test_plots_idempotent(self, battery, tmp_path):
        assert main(["plots", str(battery[1]), "--out", str(tmp_path)]) == 0
        names = {p.name for p in tmp_path.iterdir()}
        assert {"composition.tsv", "entropy_histogram.tsv", "roc.tsv", "composition.png", "roc.png"} <= names
        first = {n: (tmp_path / n).read_text() for n in names if n.endswith(".tsv")}
        emit_plots(battery[1], tmp_path)
        assert {n: (tmp_path / n).read_text() for n in first} == first
        rows = list(csv.reader((tmp_path / "composition.tsv").open(), delimiter="\t"))
        assert rows[0][:2] == ["iteration", "mean_synthetic_fraction"]
        assert [int(r[0]) for r in rows[1:]] == list(range(10, 10 * len(rows), 10))

    def test_export_embeddings(self, battery, tmp_path):
        run_dir = battery[1] / "seed_0"
        assert main(["export-embeddings", str(run_dir), "--classes", "0-4", "--out", str(tmp_path / "e.csv")]) == 0
        rows = list(csv.reader((tmp_path / "e.csv").open()))
        snapshot = [json.loads(x) for x in (run_dir / "buffer.jsonl").read_text().splitlines()]
        assert len(rows) - 1 == sum(1 for r in snapshot if r["label"] <= 4)
        assert {int(r[1]) for r in rows[1:]} <= set(range(5))

    def test_overrides(self, toy_root, tmp_path):
        path = write_config(tmp_path / "cfg.yaml", small_config(toy_root, tmp_path / "ignored"))
        out = tmp_path / "over"
        args = ["run", str(path), "--ratio", "0", "--method", "er", "--mem-strategy", "reservoir"]
        code = main(args + ["--buffer-size", "7", "--seed", "3", "--out", str(out)])
        assert code == 0
        rec = ResultsRecord.read(out)
        assert rec.config["data"]["ratio"] == 0.0 and rec.config["train"]["buffer_capacity"] == 7
        assert [r["seed"] for r in rec.runs] == [3] and rec.runs[0]["auc"] is None
        # no synthetic samples: ROC and histogram split are absent, plots warn and skip
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            emit_plots(out, tmp_path / "plots")
        assert any("ROC" in str(w.message) for w in caught)
        assert not (tmp_path / "plots" / "roc.png").exists()


def test_failed_seed_recorded(toy_root, tmp_path, monkeypatch):
    original = experiment.run_seed

    def flaky(cfg, data, seed, run_dir=None):
        if seed == 0:
            raise RuntimeError("boom")
        return original(cfg, data, seed, run_dir)

    monkeypatch.setattr(experiment, "run_seed", flaky)
    path = write_config(tmp_path / "cfg.yaml", small_config(toy_root, tmp_path / "res"))
    assert main(["run", str(path)]) == 2
    rec = ResultsRecord.read(tmp_path / "res")
    assert [r["status"] for r in rec.runs] == ["failed", "ok"]
    assert "boom" in rec.runs[0]["error"]
    assert rec.summary()["faa"]["n"] == 1


def test_config_errors_exit_1(toy_root, tmp_path, capsys):
    raw = small_config(toy_root, tmp_path)
    raw["train"]["bogus"] = 1
    assert main(["run", str(write_config(tmp_path / "c.yaml", raw))]) == 1
    assert "train.bogus" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert main(["run"]) == 1
    assert main(["plots", str(tmp_path / "empty")]) == 1


def test_contaminate_command(toy_root, tmp_path):
    out = tmp_path / "mixed"
    args = ["contaminate", "--real", str(toy_root / "real_train"), "--twin", f"twin={toy_root / 'twin'}"]
    assert main(args + ["--classes", "10", "--ratio", "0.5", "--seed", "1", "--out", str(out)]) == 0
    ds = load_dataset(out, 10)
    assert ds.synthetic_counts() == [5] * 10
    assert {s.provenance.source_tag for s in ds.samples if s.provenance.is_synthetic} == {"twin"}
    assert main(args + ["--classes", "10", "--ratio", "2", "--out", str(out)]) == 1
    assert main(args + ["--classes", "7", "--ratio", "0.5", "--out", str(out)]) == 1
