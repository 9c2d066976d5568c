import csv
import hashlib
import json

import numpy as np
import pytest

from hetapprox import cli
from hetapprox.approx_mult import load_error_map
from hetapprox.config import RunConfig, load_config
from hetapprox.errors import ConfigError
from hetapprox.matching import Assignment

TINY = {
    "data": {"classes": 3, "per_class": 30, "dim": [1, 8, 8]},
    "train": {"epochs": 2},
    "noise": {"epochs": 2},
    "retrain": {"epochs": 1},
    "lambdas": [0.0],
    "k_samples": 32,
    "uniform_baselines": False,
}


@pytest.fixture
def env(tmp_path, monkeypatch):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    return tmp_path, str(cfg)


# ------------------------------------------------------------------- config

def test_config_defaults_valid():
    cfg = RunConfig()
    assert cfg.lambdas[0] == 0.0 and cfg.lambdas[-1] == pytest.approx(0.6) and len(cfg.lambdas) == 13


@pytest.mark.parametrize("bad", [
    {"lambdas": [-0.1]},
    {"lambdas": []},
    {"noise": {"sigma_max": 0}},
    {"library": ""},
    {"arch": "resnet"},
    {"bogus": 1},
    {"noise": {"bogus": 1}},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_round_trip_and_overrides():
    cfg = RunConfig.from_dict(TINY)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.with_overrides({"noise.lam": 0.3}).noise.lam == 0.3
    with pytest.raises(ConfigError):
        cfg.with_overrides({"noise.nope": 1})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# ---------------------------------------------------------------------- cli

def test_multgen(tmp_path):
    assert cli.main(["multgen", "trunc", "--t", "3", "--out", str(tmp_path / "t3.emap")]) == 0
    assert load_error_map(tmp_path / "t3.emap").name == "trunc3"
    assert cli.main(["multgen", "accurate", "--out", str(tmp_path / "a.emap")]) == 0
    assert not load_error_map(tmp_path / "a.emap").errors.any()
    assert cli.main(["multgen", "foo", "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["multgen", "trunc", "--t", "9", "--out", str(tmp_path / "x")]) == 1


def test_usage_errors_exit_1(env):
    assert cli.main([]) == 1
    assert cli.main(["train", "--config", "missing.json"]) == 1
    assert cli.main(["train", "--set", "nokey"]) == 1


def test_bad_library_file_exit_2(env, tmp_path):
    lib = tmp_path / "lib"
    lib.mkdir()
    (lib / "index.txt").write_text("broken.emap\n")
    (lib / "broken.emap").write_text("emap-v1 broken 8 unsigned 0.5\n1 2 3\n")
    _, cfg = env
    assert cli.main(["train", "--config", cfg]) == 0
    ckpt = str(tmp_path / "out" / "baseline" / "checkpoint.json")
    assert cli.main(["characterize", "--config", cfg, "--checkpoint", ckpt, "--library", str(lib)]) == 2


def test_pipeline_commands(env, capsys):
    tmp_path, cfg = env
    out = tmp_path / "out"
    assert cli.main(["train", "--config", cfg]) == 0
    ckpt = out / "baseline" / "checkpoint.json"
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    assert "val acc" in capsys.readouterr().out
    # reproducible checkpoint
    assert cli.main(["train", "--config", cfg]) == 0
    assert hashlib.sha256(ckpt.read_bytes()).hexdigest() == digest

    assert cli.main(["search", "--config", cfg, "--checkpoint", str(ckpt), "--lam", "0.6"]) == 0
    search_dir = out / "search_lambda_0.60"
    with open(search_dir / "search_log.csv") as fh:
        assert len(list(csv.DictReader(fh))) == TINY["noise"]["epochs"]
    # resuming with a different config is rejected
    assert cli.main(["search", "--config", cfg, "--checkpoint", str(ckpt), "--lam", "0.6",
                     "--set", "noise.epochs=3"]) == 1

    assert cli.main(["characterize", "--config", cfg, "--checkpoint", str(ckpt)]) == 0
    assert "pearson" in capsys.readouterr().out
    report = (out / "characterize.csv").read_bytes()
    with open(out / "characterize.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["sigma_e"]) == 0 and float(r["mc_std"]) == 0 for r in rows if r["multiplier"] == "accurate")
    assert cli.main(["characterize", "--config", cfg, "--checkpoint", str(ckpt)]) == 0
    assert (out / "characterize.csv").read_bytes() == report

    searched = search_dir / "checkpoint.json"
    assert cli.main(["match", "--config", cfg, "--checkpoint", str(searched)]) == 0
    assert "energy_rel" in capsys.readouterr().out
    assignment = Assignment.load(out / "assignment.json")
    assert 0 < assignment.energy_total_rel <= 1.0

    acc = tmp_path / "acc.json"
    Assignment({n: "accurate" for n in assignment.layers}).save(acc)
    assert cli.main(["simulate", "--config", cfg, "--checkpoint", str(ckpt), "--assignment", str(acc),
                     "--no-retrain"]) == 0
    metrics = json.loads((out / "simulate_metrics.json").read_text())
    summary = json.loads((out / "baseline" / "train_summary.json").read_text())
    assert metrics["approx_acc"] == summary["int_val_acc"]

    assert cli.main(["simulate", "--config", cfg, "--checkpoint", str(ckpt),
                     "--assignment", str(out / "assignment.json")]) == 0
    metrics = json.loads((out / "simulate_metrics.json").read_text())
    assert {"approx_acc", "retrained_acc"} <= set(metrics)


def test_simulate_nan_leaves_checkpoint(env, monkeypatch):
    tmp_path, cfg = env
    out = tmp_path / "out"
    assert cli.main(["train", "--config", cfg]) == 0
    ckpt = out / "baseline" / "checkpoint.json"
    before = ckpt.read_bytes()
    acc = tmp_path / "acc.json"
    names = [l["name"] for l in json.loads(before)["layers"] if "name" in l]
    Assignment({n: "accurate" for n in names}).save(acc)
    code = cli.main(["simulate", "--config", cfg, "--checkpoint", str(ckpt), "--assignment", str(acc),
                     "--set", "retrain.lr=1e300"])
    assert code == 3
    assert ckpt.read_bytes() == before
    assert not (out / "retrained_checkpoint.json").exists()


def test_search_lambda_changes_sigma(env):
    tmp_path, cfg = env
    out = tmp_path / "out"
    assert cli.main(["train", "--config", cfg]) == 0
    ckpt = str(out / "baseline" / "checkpoint.json")
    sig = {}
    for lam in ("0.0", "0.6"):
        assert cli.main(["search", "--config", cfg, "--checkpoint", ckpt, "--lam", lam,
                         "--set", "noise.epochs=4"]) == 0
        sig[lam] = np.abs(json.loads((out / f"search_lambda_{float(lam):.2f}" / "checkpoint.json")
                                     .read_text())["sigma"]).mean()
    assert sig["0.6"] != sig["0.0"]


def test_sweep_grid_of_one(env):
    tmp_path, cfg = env
    assert cli.main(["sweep", "--config", cfg, "--out-dir", str(tmp_path / "sw")]) == 0
    root = tmp_path / "sw" / "sweep"
    with open(root / "pareto.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["front"] == "1"
    assert (root / "lambda_0.00" / "assignment.json").exists()
    assert (root / "lambda_0.00" / "search_log.csv").exists()
