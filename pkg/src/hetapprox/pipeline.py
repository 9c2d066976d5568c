"""End-to-end stages shared by the CLI and the experiment scripts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import approx_mult, error_model
from .agn_search import NoiseInjector, SearchResult, gradient_search, write_search_log
from .config import RunConfig
from .datasets import Dataset, gen_synthetic, load_idx, split
from .errors import ConfigError
from .matching import (
    Assignment,
    SensitivityProfile,
    energy_total,
    match_network,
    pareto_front,
    reduction_pct,
    sensitivity_profile,
    uniform_assignment,
)
from .nn.network import QuantNetwork, build_network
from .nn.train import LRSchedule, accuracy, retrain_ste, train

log = logging.getLogger(__name__)

PARETO_COLUMNS = ["lambda", "energy_rel", "reduction_pct", "top1_acc", "agn_acc", "retrained_acc",
                  "baseline_retrained_acc", "mean_sigma", "front"]


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    calib: Dataset


def load_data(cfg: RunConfig) -> Splits:
    d = cfg.data
    if d.source == "idx":
        try:
            ds = load_idx(d.images, d.labels)
        except FileNotFoundError as exc:
            raise ConfigError(f"dataset file not found: {exc.filename}") from None
    else:
        ds = gen_synthetic(d.classes, d.per_class, d.dim, seed=d.seed, separation=d.separation, noise=d.noise)
    return Splits(*split(ds, d.fractions, seed=d.seed))


def arch_specs(arch: str, input_shape: tuple, classes: int) -> list[dict]:
    if arch == "cnn":
        c, h, w = input_shape
        flat = 16 * (h // 4) * (w // 4)
        return [
            {"kind": "conv2d", "name": "conv1", "in_channels": c, "out_channels": 8, "kernel": 3, "padding": 1},
            {"kind": "relu"}, {"kind": "maxpool", "size": 2},
            {"kind": "conv2d", "name": "conv2", "in_channels": 8, "out_channels": 16, "kernel": 3, "padding": 1},
            {"kind": "relu"}, {"kind": "maxpool", "size": 2},
            {"kind": "flatten"},
            {"kind": "dense", "name": "fc1", "in_features": flat, "out_features": 32},
            {"kind": "relu"},
            {"kind": "dense", "name": "fc2", "in_features": 32, "out_features": classes},
        ]
    if arch == "mlp":
        d = int(np.prod(input_shape))
        specs = [{"kind": "flatten"}] if len(input_shape) > 1 else []
        return specs + [
            {"kind": "dense", "name": "fc1", "in_features": d, "out_features": 64}, {"kind": "relu"},
            {"kind": "dense", "name": "fc2", "in_features": 64, "out_features": 32}, {"kind": "relu"},
            {"kind": "dense", "name": "fc3", "in_features": 32, "out_features": classes},
        ]
    raise ConfigError(f"unknown architecture {arch!r}")


def load_multipliers(spec: str) -> approx_mult.MultiplierLibrary:
    if spec == "builtin":
        lib = approx_mult.builtin_library()
    else:
        try:
            lib = approx_mult.load_library(spec)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None
    return lib.with_accurate()


def train_baseline(cfg: RunConfig, splits: Splits) -> tuple[QuantNetwork, dict]:
    """Float training followed by min-max calibration on the calib split."""
    specs = arch_specs(cfg.arch, splits.train.input_shape, splits.train.num_classes)
    net = build_network(specs, splits.train.input_shape, seed=cfg.seed)
    t = cfg.train
    net, history = train(net, splits.train, t.epochs, LRSchedule(t.lr, t.decay, t.decay_every),
                         t.batch_size, "float", t.momentum, cfg.seed)
    net.calibrate(splits.calib.inputs)
    summary = {
        "float_val_acc": accuracy(net, splits.val, "float"),
        "int_val_acc": accuracy(net, splits.val, "int"),
        "loss_history": history,
    }
    return net, summary


def agn_accuracy(net: QuantNetwork, data: Dataset, seed: int = 0, batch_size: int = 256) -> float:
    """Accuracy with the learned AGN injected (fake-quantized forward)."""
    preds = []
    for b, s in enumerate(range(0, len(data), batch_size)):
        inj = NoiseInjector(net.sigma, seed, 1 << 16, b)
        preds.append(net.forward(data.inputs[s:s + batch_size], mode="fakequant", noise=inj).argmax(axis=1))
    return float((np.concatenate(preds) == data.labels).mean())


def run_search(cfg: RunConfig, net: QuantNetwork, splits: Splits, lam: float | None = None) -> SearchResult:
    noise = cfg.noise if lam is None else type(cfg.noise)(**{**cfg.noise.__dict__, "lam": float(lam)})
    return gradient_search(net, splits.train, noise, calib=splits.calib, seed=cfg.seed)


def characterize_net(net: QuantNetwork, library, calib: Dataset, k: int, seed: int = 0,
                     within: str = "conditional") -> list[dict]:
    return error_model.characterize(net.capture(calib.inputs), library, k=k, seed=seed, within=within)


def sigma_table(rows: list[dict]) -> dict:
    """Predicted error std per (layer, multiplier) in float pre-activation units."""
    table: dict = {}
    for r in rows:
        table.setdefault(r["layer"], {})[r["multiplier"]] = r["sigma_e"] * r["out_scale"]
    return table


def match(net: QuantNetwork, library, calib: Dataset, rows: list[dict],
          lam: float | None = None) -> tuple[Assignment, SensitivityProfile, dict]:
    profile = sensitivity_profile(net, calib.inputs)
    table = sigma_table(rows)
    assignment = match_network(profile, table, library)
    assignment.lambda_used = lam
    assignment.energy_total_rel = energy_total(assignment, net, library)
    assignment.provenance = {
        "threshold_abs": dict(zip(profile.names, profile.threshold_abs.tolist())),
        "sigma": dict(zip(profile.names, net.sigma.tolist())),
        "calib_std": dict(zip(profile.names, profile.calib_std.tolist())),
    }
    return assignment, profile, table


def simulate(cfg: RunConfig, net: QuantNetwork, assignment: Assignment, library, splits: Splits,
             retrain: bool = True) -> tuple[dict, QuantNetwork]:
    """Approximate accuracy before and (optionally) after STE retraining."""
    net = net.copy()
    net.assign(assignment.maps(library))
    metrics = {"approx_acc": accuracy(net, splits.val, "approx")}
    if retrain:
        r = cfg.retrain
        net = retrain_ste(net, splits.train, r.epochs, LRSchedule(r.lr, r.decay, r.decay_every), r.batch_size,
                          seed=cfg.seed + 1, calib=splits.calib, momentum=r.momentum)
        metrics["retrained_acc"] = accuracy(net, splits.val, "approx")
    return metrics, net


@dataclass
class SweepResult:
    baseline_acc: float
    points: list[dict] = field(default_factory=list)
    uniform: list[dict] = field(default_factory=list)


def pareto_sweep(cfg: RunConfig, baseline: QuantNetwork, library, splits: Splits, out_dir=None) -> SweepResult:
    """For every lambda: search, characterize, match, retrain (from the searched
    and from the baseline weights), evaluate; then mark the Pareto front."""
    out_dir = Path(out_dir) if out_dir is not None else None
    result = SweepResult(accuracy(baseline, splits.val, "int"))
    for lam in cfg.lambdas:
        searched = run_search(cfg, baseline, splits, lam)
        net = searched.net
        rows = characterize_net(net, library, splits.calib, cfg.k_samples, cfg.seed)
        assignment, _, _ = match(net, library, splits.calib, rows, lam)
        metrics, _ = simulate(cfg, net, assignment, library, splits)
        base_metrics, _ = simulate(cfg, baseline, assignment, library, splits)
        assignment.accuracy_metrics = {**metrics, "agn_acc": agn_accuracy(net, splits.val, cfg.seed),
                                       "baseline_retrained_acc": base_metrics["retrained_acc"]}
        point = {
            "lambda": float(lam),
            "energy_rel": assignment.energy_total_rel,
            "reduction_pct": reduction_pct(assignment.energy_total_rel),
            "top1_acc": metrics["approx_acc"],
            "agn_acc": assignment.accuracy_metrics["agn_acc"],
            "retrained_acc": metrics["retrained_acc"],
            "baseline_retrained_acc": base_metrics["retrained_acc"],
            "mean_sigma": float(np.mean(np.abs(net.sigma))),
            "assignment": assignment.layers,
        }
        log.info("lambda %.2f: energy %.4f, retrained acc %.4f (baseline weights %.4f) %s", lam,
                 point["energy_rel"], point["retrained_acc"], point["baseline_retrained_acc"], assignment.layers)
        result.points.append(point)
        if out_dir is not None:
            sub = out_dir / f"lambda_{lam:.2f}"
            sub.mkdir(parents=True, exist_ok=True)
            write_search_log(searched.log, sub / "search_log.csv", len(net.sigma))
            net.save(sub / "checkpoint.json")
            error_model.write_report(rows, sub / "characterize.csv")
            assignment.save(sub / "assignment.json")
    front = pareto_front([p["energy_rel"] for p in result.points], [p["retrained_acc"] for p in result.points])
    for p, f in zip(result.points, front):
        p["front"] = bool(f)
    if cfg.uniform_baselines:
        result.uniform = uniform_baselines(cfg, baseline, library, splits)
    if out_dir is not None:
        write_sweep(result, out_dir)
    return result


def uniform_baselines(cfg: RunConfig, baseline: QuantNetwork, library, splits: Splits) -> list[dict]:
    """One multiplier everywhere, retrained from the baseline weights."""
    out = []
    for emap in library:
        a = uniform_assignment(baseline, emap.name)
        metrics, _ = simulate(cfg, baseline, a, library, splits)
        out.append({"multiplier": emap.name, "energy_rel": energy_total(a, baseline, library),
                    "top1_acc": metrics["approx_acc"], "retrained_acc": metrics["retrained_acc"]})
    return out


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_sweep(result: SweepResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "pareto.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARETO_COLUMNS)
        for p in result.points:
            w.writerow([_fmt(p[c]) for c in PARETO_COLUMNS])
    if result.uniform:
        with open(out_dir / "uniform.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["multiplier", "energy_rel", "top1_acc", "retrained_acc"])
            for u in result.uniform:
                w.writerow([u["multiplier"], _fmt(u["energy_rel"]), _fmt(u["top1_acc"]), _fmt(u["retrained_acc"])])
    summary = {"baseline_acc": result.baseline_acc,
               "points": [{k: v for k, v in p.items()} for p in result.points],
               "uniform": result.uniform}
    (out_dir / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

