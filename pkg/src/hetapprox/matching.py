"""Turn learned robustness into a per-layer multiplier assignment."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx_mult import MultiplierLibrary
from .errors import ConfigError
from .nn.network import QuantNetwork

log = logging.getLogger(__name__)

ASSIGNMENT_FORMAT = "hetapprox-assignment-v1"


@dataclass
class SensitivityProfile:
    """Per-layer error budget ``threshold_abs = |sigma_l| * calib_std`` in pre-activation units."""

    names: list[str]
    sigma_abs: np.ndarray
    calib_std: np.ndarray

    def __post_init__(self):
        self.sigma_abs = np.abs(np.asarray(self.sigma_abs, dtype=np.float64))
        self.calib_std = np.asarray(self.calib_std, dtype=np.float64)
        if np.any(self.calib_std < 0) or not np.all(np.isfinite(self.threshold_abs)):
            raise ValueError("calibration std must be >= 0 and thresholds finite")

    @property
    def threshold_abs(self) -> np.ndarray:
        return self.sigma_abs * self.calib_std

    def threshold(self, name: str) -> float:
        return float(self.threshold_abs[self.names.index(name)])


def sensitivity_profile(net: QuantNetwork, calib_inputs) -> SensitivityProfile:
    """Scale each learned ``|sigma_l|`` by the std of the layer's accurate
    pre-activation output on the calibration set."""
    pre = net.preactivations(calib_inputs, mode="int")
    names = net.layer_names
    return SensitivityProfile(names, net.sigma, np.array([pre[n].std() for n in names]))


def match_layer(threshold_abs: float, candidates) -> str:
    """Cheapest multiplier whose predicted error std fits the threshold.

    ``candidates`` is a sequence of ``(name, sigma_e, energy_rel)`` in library
    order. Ties on energy go to the smaller ``sigma_e``, then library order.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate multipliers")
    feasible = [(energy, sigma_e, i, name) for i, (name, sigma_e, energy) in enumerate(candidates)
                if sigma_e <= threshold_abs]
    if not feasible:
        raise ValueError(f"no candidate meets threshold {threshold_abs}; include the accurate multiplier")
    return min(feasible)[3]


@dataclass
class Assignment:
    layers: dict[str, str]
    lambda_used: float | None = None
    energy_total_rel: float | None = None
    accuracy_metrics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def maps(self, library: MultiplierLibrary) -> dict:
        missing = [m for m in self.layers.values() if m not in library]
        if missing:
            raise ConfigError(f"assignment uses multipliers not in the library: {missing}")
        return {layer: library[m] for layer, m in self.layers.items()}

    @property
    def is_uniform(self) -> bool:
        return len(set(self.layers.values())) == 1

    def to_dict(self) -> dict:
        return {
            "format": ASSIGNMENT_FORMAT,
            "layers": self.layers,
            "lambda": self.lambda_used,
            "energy_total_rel": self.energy_total_rel,
            "accuracy_metrics": self.accuracy_metrics,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Assignment:
        if d.get("format") != ASSIGNMENT_FORMAT:
            raise ConfigError(f"not an assignment file (format {d.get('format')!r})")
        return cls(dict(d["layers"]), d.get("lambda"), d.get("energy_total_rel"),
                   dict(d.get("accuracy_metrics", {})), dict(d.get("provenance", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> Assignment:
        return cls.from_dict(json.loads(Path(path).read_text()))


def energy_total(assignment: Assignment, net: QuantNetwork, library: MultiplierLibrary) -> float:
    """Multiplication-count weighted energy relative to an all-accurate network."""
    counts = {l.name: l.mult_count for l in net.compute_layers}
    if set(counts) != set(assignment.layers):
        raise ConfigError("assignment layers do not match the network's compute layers")
    total = sum(counts.values())
    return sum(counts[n] * library[m].energy_rel for n, m in assignment.layers.items()) / total


def uniform_assignment(net: QuantNetwork, name: str) -> Assignment:
    return Assignment({n: name for n in net.layer_names})


def match_network(profile: SensitivityProfile, table: dict, library: MultiplierLibrary) -> Assignment:
    """Assign every layer; ``table[layer][multiplier]`` is the predicted float ``sigma_e``."""
    layers = {}
    for name, thr in zip(profile.names, profile.threshold_abs):
        cands = [(m.name, table[name][m.name], m.energy_rel) for m in library]
        layers[name] = match_layer(thr, cands)
    return Assignment(layers)


def check_feasible(assignment: Assignment, profile: SensitivityProfile, table: dict) -> bool:
    return all(table[n][m] <= profile.threshold(n) for n, m in assignment.layers.items())


def pareto_front(energy, accuracy) -> np.ndarray:
    """Mask of points not dominated in (lower energy, higher accuracy)."""
    e = np.asarray(energy, dtype=np.float64)
    a = np.asarray(accuracy, dtype=np.float64)
    mask = np.ones(len(e), dtype=bool)
    for i in range(len(e)):
        dominated = (e <= e[i]) & (a >= a[i]) & ((e < e[i]) | (a > a[i]))
        mask[i] = not dominated.any()
    return mask


def reduction_pct(energy: float) -> float:
    return 100.0 * (1.0 - energy)


def nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v
