"""Probabilistic estimate of the aggregate multiplier error at a layer output.

The per-multiplication error ``Z = e(x, w)`` is treated as a discrete random
variable over operand histograms. Moments are computed for many local
activation samples (receptive fields) against one global weight histogram,
pooled, and scaled by the fan-in: ``mu_e = n * mu_Z``, ``sigma_e = sqrt(n) * sigma_Z``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .approx_mult import SIZE, ErrorMap
from .nn.layers import error_sum
from .nn.network import LayerCapture

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 512
LOW_FAN_IN = 32


@dataclass(frozen=True)
class OperandHistogram:
    probs: np.ndarray
    domain: str = "activation"

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (SIZE,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("histogram must hold 256 non-negative probabilities summing to 1")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class ErrorStats:
    mu_z: float
    sigma_z: float
    fan_in: int

    @property
    def mu_e(self) -> float:
        return self.fan_in * self.mu_z

    @property
    def sigma_e(self) -> float:
        return math.sqrt(self.fan_in) * self.sigma_z


@dataclass(frozen=True)
class SampleSet:
    """``k`` receptive-field operand vectors drawn from one layer's recorded inputs."""

    samples: np.ndarray  # (k, fan_in) uint8

    @property
    def k(self) -> int:
        return len(self.samples)


def histogram(values, domain: str = "activation") -> OperandHistogram:
    v = np.asarray(values).ravel()
    if v.size == 0:
        raise ValueError("cannot build a histogram from an empty collection")
    if np.any((v < 0) | (v >= SIZE)):
        raise ValueError("histogram values must be 8-bit operands")
    counts = np.bincount(v.astype(np.int64), minlength=SIZE)
    return OperandHistogram(counts / v.size, domain)


def single_dist_stats(emap: ErrorMap, px: OperandHistogram, pw: OperandHistogram) -> tuple[float, float]:
    """Mean and std of ``e(x, w)`` for independent ``x ~ px``, ``w ~ pw`` (two-pass, exact support)."""
    ix = np.flatnonzero(px.probs)
    iw = np.flatnonzero(pw.probs)
    e = emap.errors[np.ix_(ix, iw)].astype(np.float64)
    p = np.outer(px.probs[ix], pw.probs[iw])
    mu = float((p * e).sum())
    var = float((p * (e - mu) ** 2).sum())
    return mu, math.sqrt(var)


def combine_groups(stats) -> tuple[float, float]:
    """Pool equally weighted groups ``(mu_i, sigma_i)`` into one mean and std,
    including the spread of the group means."""
    stats = np.asarray(list(stats), dtype=np.float64).reshape(-1, 2)
    k = len(stats)
    if k == 0:
        raise ValueError("no groups to combine")
    mu, sd = stats[:, 0], stats[:, 1]
    var = (np.sum(sd**2 + mu**2) - np.sum(mu) ** 2 / k) / k
    return float(np.sum(mu) / k), math.sqrt(max(var, 0.0))


def draw_samples(xq, k: int = DEFAULT_SAMPLES, seed=0) -> SampleSet:
    """Uniformly pick ``k`` rows (input, position) of a layer's receptive-field matrix."""
    xq = np.asarray(xq)
    if k < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(xq), size=k, replace=len(xq) < k)
    return SampleSet(xq[np.sort(idx)])


def _check_fan_in(fan_in, samples: SampleSet):
    if samples.k == 0:
        raise ValueError("sample set is empty")
    if samples.samples.shape[1] != fan_in:
        raise ValueError(f"sample length {samples.samples.shape[1]} does not match fan-in {fan_in}")
    if fan_in < LOW_FAN_IN:
        log.warning("fan-in %d is below %d; the normal approximation of the aggregate error may be poor",
                    fan_in, LOW_FAN_IN)


def _fan_in(layer) -> int:
    return layer if isinstance(layer, (int, np.integer)) else layer.fan_in


def per_operand_moments(emap: ErrorMap, pw: OperandHistogram) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``e(x, w)`` over ``w ~ pw`` for every activation value ``x``."""
    iw = np.flatnonzero(pw.probs)
    e = emap.errors[:, iw].astype(np.float64)
    p = pw.probs[iw]
    g = e @ p
    v = ((e - g[:, None]) ** 2) @ p
    return g, v


def local_moments(emap: ErrorMap, samples: SampleSet, pw: OperandHistogram, within: str = "conditional"):
    """Per-sample ``(mu_Zi, sigma_Zi)`` from each sample's own activation histogram.

    ``"conditional"`` (default) keeps only the variance over ``w`` with the
    sample's activations fixed. A neuron sums ``e(x_k, w_k)`` over one fixed
    receptive field with independent weights, so its error variance is exactly
    ``sum_k Var_w[e(x_k, w)]``. ``"joint"`` is the full single-distribution
    variance of ``e(x, w)`` under ``px_i * pw``. It adds the spread of
    ``E_w[e(x_k, w)]`` across positions, which neurons sharing the field do
    not see, and so overestimates.
    """
    g, v = per_operand_moments(emap, pw)
    x = samples.samples.astype(np.int64)
    mu = g[x].mean(axis=1)
    var = v[x].mean(axis=1)
    if within == "joint":
        var = var + g[x].var(axis=1)
    elif within != "conditional":
        raise ValueError(f"within must be 'joint' or 'conditional', got {within!r}")
    return mu, np.sqrt(var)


def estimate_layer_error(emap: ErrorMap, layer, samples: SampleSet, pw: OperandHistogram,
                         within: str = "conditional") -> ErrorStats:
    """Multi-distribution estimate of the aggregate error at one layer's output.

    Each sample's local moments are taken to the neuron output first
    (``n * mu_Zi``, ``sqrt(n) * sigma_Zi``) and then pooled with
    ``combine_groups``, so the spread of local means enters with its full
    weight. ``layer`` is a compute layer or its fan-in.
    """
    n = _fan_in(layer)
    _check_fan_in(n, samples)
    if emap.is_accurate:
        return ErrorStats(0.0, 0.0, n)
    mu, sd = local_moments(emap, samples, pw, within)
    mu_e, sigma_e = combine_groups(np.column_stack([n * mu, math.sqrt(n) * sd]))
    return ErrorStats(mu_e / n, sigma_e / math.sqrt(n), n)


def single_dist_mode(emap: ErrorMap, layer, global_px: OperandHistogram, pw: OperandHistogram) -> ErrorStats:
    """Ablation: one global activation histogram instead of local samples."""
    n = _fan_in(layer)
    mu, sd = single_dist_stats(emap, global_px, pw)
    return ErrorStats(mu, sd, n)


def mc_oracle(emap: ErrorMap, capture: LayerCapture) -> tuple[float, float]:
    """Measured mean and population std of ``y_approx - y_accurate`` over all
    neurons and recorded inputs of one layer, in integer accumulator units."""
    accurate = capture.accumulate()
    approx = capture.accumulate(emap)
    diff = (approx - accurate).astype(np.float64)
    return float(diff.mean()), float(diff.std())


def mc_oracle_net(emap: ErrorMap, net, layer_index: int, inputs) -> tuple[float, float]:
    """``mc_oracle`` on compute layer ``layer_index`` of ``net`` (accurate elsewhere)."""
    layers = net.compute_layers
    if not 0 <= layer_index < len(layers):
        raise ValueError(f"layer {layer_index} has no weights (network has {len(layers)} compute layers)")
    cap = net.capture(inputs)[layers[layer_index].name]
    return mc_oracle(emap, cap)



def mean_relative_error(emap: ErrorMap) -> float:
    """Mean of ``|e(x, w)| / (x * w)`` over all non-zero operand pairs, uniform weighting."""
    x = np.arange(SIZE, dtype=np.float64)
    prod = np.outer(x, x)
    nz = prod > 0
    return float(np.mean(np.abs(emap.errors[nz]) / prod[nz]))


def relative_error(estimate: float, measured: float) -> float:
    if measured == 0:
        return 0.0 if estimate == 0 else math.inf
    return abs(estimate - measured) / measured


REPORT_COLUMNS = [
    "layer", "multiplier", "mu_z", "sigma_z", "fan_in", "sigma_e", "mc_mean", "mc_std", "rel_err",
    "mu_e", "single_sigma_e", "single_rel_err", "mre", "out_scale",
]


def characterize(captures: dict[str, LayerCapture], library, k: int = DEFAULT_SAMPLES, seed: int = 0,
                 within: str = "conditional") -> list[dict]:
    """One report row per (layer, multiplier): estimates, single-distribution
    ablation and the behavioral measurement, all in accumulator units."""
    rows = []
    mres = {m.name: mean_relative_error(m) for m in library}
    for li, (name, cap) in enumerate(captures.items()):
        n = cap.wq.shape[1]
        pw = histogram(cap.wq, "weight")
        global_px = histogram(cap.xq)
        samples = draw_samples(cap.xq, k, seed=[seed, li])
        for emap in library:
            est = estimate_layer_error(emap, n, samples, pw, within)
            single = single_dist_mode(emap, n, global_px, pw)
            mc_mean, mc_std = mc_oracle(emap, cap)
            rows.append({
                "layer": name, "multiplier": emap.name,
                "mu_z": est.mu_z, "sigma_z": est.sigma_z, "fan_in": n, "sigma_e": est.sigma_e,
                "mc_mean": mc_mean, "mc_std": mc_std, "rel_err": relative_error(est.sigma_e, mc_std),
                "mu_e": est.mu_e, "single_sigma_e": single.sigma_e,
                "single_rel_err": relative_error(single.sigma_e, mc_std),
                "mre": mres[emap.name], "out_scale": cap.out_scale,
            })
    return rows


def summarize(rows: list[dict]) -> dict:
    """Pearson correlation and median relative error (with IQR) against the
    measured std, over rows with non-zero measured error."""
    r = [row for row in rows if row["mc_std"] > 0]
    if len(r) < 2:
        raise ValueError("need at least two rows with non-zero measured error")
    mc = np.array([row["mc_std"] for row in r])
    out = {"rows": len(r)}
    for key, est_key, rel_key in (("multi", "sigma_e", "rel_err"), ("single", "single_sigma_e", "single_rel_err")):
        est = np.array([row[est_key] for row in r])
        rel = np.array([row[rel_key] for row in r])
        q1, q3 = np.percentile(rel, [25, 75])
        out[key] = {"pearson": float(np.corrcoef(est, mc)[0, 1]), "median_rel_err": float(np.median(rel)),
                    "iqr": float(q3 - q1)}
    mre = np.array([row["mre"] for row in r])
    out["mre_pearson"] = float(np.corrcoef(mre, mc)[0, 1])
    return out


def write_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
