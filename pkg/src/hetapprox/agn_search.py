"""Learning per-layer noise robustness with additive Gaussian noise (AGN).

Each weight-bearing layer ``l`` gets a factor ``sigma_l``. During training its
pre-activation ``y`` is replaced by ``y + sigma_l * std(y) * q`` with
``q ~ N(0, 1)``, and the loss is the task loss plus ``lambda`` times a
capped, cost-weighted reward for large ``|sigma_l|``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .nn.network import QuantNetwork
from .nn.train import SGD, LRSchedule, batches, params_finite, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class NoiseConfig:
    sigma_init: float = 0.1
    sigma_max: float = 0.5
    lam: float = 0.0
    epochs: int = 30
    lr: float = 1e-2
    lr_decay: float = 0.9
    decay_every: int = 10
    batch_size: int = 64

    def __post_init__(self):
        if not self.sigma_max > 0:
            raise ConfigError(f"sigma_max must be > 0, got {self.sigma_max}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and decay_every >= 1 required")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.lr_decay, self.decay_every)


@dataclass
class LayerPerturbation:
    sigma_l: float
    c_l: float
    last_batch_std: float = 0.0


def relative_costs(mult_counts) -> np.ndarray:
    """``c_l = c(l) / sum c(l)`` with the multiplication count as cost."""
    c = np.asarray(mult_counts, dtype=np.float64)
    if c.size == 0 or np.any(c <= 0):
        raise ConfigError("every compute layer needs a positive multiplication count")
    return c / c.sum()


def noise_draw(seed: int, epoch: int, batch: int, layer: int, shape) -> np.ndarray:
    """Standard-normal tensor, reproducible from its (seed, epoch, batch, layer) counter."""
    return np.random.default_rng([seed, epoch, batch, layer]).standard_normal(shape)


def batch_std(y) -> float:
    return float(np.std(y))


def inject_noise(y, sigma_l: float, q) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.shape(q) != y.shape:
        raise ValueError(f"noise shape {np.shape(q)} does not match output shape {y.shape}")
    if sigma_l == 0:
        return y.copy()
    return y + sigma_l * batch_std(y) * q


def grad_sigma_task(upstream, y, q) -> float:
    """``dL_T/dsigma_l = sum(upstream * std(y) * q)``; ``std(y)`` is held constant."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != np.shape(q) or np.shape(y) != np.shape(q):
        raise ValueError("upstream gradient, output and noise draw must share a shape")
    return float(np.sum(upstream * q) * batch_std(y))


def noise_loss(perturbations, sigma_max: float) -> float:
    return -float(sum(min(abs(p.sigma_l), sigma_max) * p.c_l for p in perturbations))


def grad_sigma_noise(sigma_l: float, c_l: float, sigma_max: float) -> float:
    """Derivative of ``-min(|sigma_l|, sigma_max) * c_l``; zero at the kink ``sigma_l = 0``."""
    if abs(sigma_l) > sigma_max or sigma_l == 0:
        return 0.0
    return -c_l if sigma_l > 0 else c_l


def total_loss(task: float, noise: float, lam: float) -> float:
    return task + lam * noise


class NoiseInjector:
    """Forward/backward hook handed to ``QuantNetwork.forward``.

    ``draws`` maps a compute-layer index to a fixed noise tensor; otherwise
    tensors come from ``noise_draw`` keyed by ``(seed, epoch, batch, layer)``.
    ``stds`` optionally pins the per-layer ``std(y)`` (the gradient treats it
    as a constant, so finite-difference checks pin it too).
    """

    def __init__(self, sigma, seed: int = 0, epoch: int = 0, batch: int = 0, draws=None, stds=None):
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.seed, self.epoch, self.batch = seed, epoch, batch
        self.draws = draws
        self.fixed_stds = None if stds is None else np.asarray(stds, dtype=np.float64)
        self.used = {}
        self.stds = np.zeros_like(self.sigma)
        self._grad = np.zeros_like(self.sigma)

    def __call__(self, j: int, y):
        if self.draws is not None:
            q = self.draws[j]
        else:
            q = noise_draw(self.seed, self.epoch, self.batch, j, y.shape)
        std = batch_std(y) if self.fixed_stds is None else float(self.fixed_stds[j])
        self.used[j] = q
        self.stds[j] = std
        if np.shape(q) != y.shape:
            raise ValueError(f"noise shape {np.shape(q)} does not match output shape {y.shape}")
        return y + self.sigma[j] * std * q

    def backward(self, j: int, g):
        q = self.used[j]
        self._grad[j] = float(np.sum(np.asarray(g) * q) * self.stds[j])
        return g

    def sigma_grad(self) -> np.ndarray:
        return self._grad.copy()


@dataclass
class SearchResult:
    net: QuantNetwork
    log: list[dict] = field(default_factory=list)


def search_losses(net: QuantNetwork, x, labels, cfg: NoiseConfig, injector: NoiseInjector, mode="fakequant"):
    """Forward with AGN; returns (task loss, noise loss, total loss, dlogits)."""
    logits = net.forward(x, mode=mode, noise=injector, record=True)
    task, g = softmax_cross_entropy(logits, labels)
    costs = relative_costs(net.mult_counts)
    perts = [LayerPerturbation(s, c) for s, c in zip(injector.sigma, costs)]
    noise = noise_loss(perts, cfg.sigma_max)
    return task, noise, total_loss(task, noise, cfg.lam), g


def sigma_total_grad(net: QuantNetwork, task_grad, cfg: NoiseConfig) -> np.ndarray:
    costs = relative_costs(net.mult_counts)
    noise_g = np.array([grad_sigma_noise(s, c, cfg.sigma_max) for s, c in zip(net.sigma, costs)])
    return task_grad + cfg.lam * noise_g


def gradient_search(net: QuantNetwork, data, cfg: NoiseConfig, calib=None, seed: int | None = None,
                    mode: str = "fakequant") -> SearchResult:
    """Jointly train weights, biases and ``sigma_l`` with plain SGD on the AGN loss.

    Returns a trained copy and one log row per epoch. ``calib`` refreshes the
    activation quantizers at the start of each epoch.
    """
    net = net.copy()
    seed = net.rng_seed if seed is None else seed
    net.sigma = np.full(len(net.compute_layers), float(cfg.sigma_init))
    if calib is None and mode != "float" and not net.act_quant:
        raise ConfigError("fake-quantized search needs calibration data or a calibrated network")
    opt = SGD(net)
    rows = []
    last_good = net.copy()
    for epoch in range(cfg.epochs):
        if calib is not None and mode != "float":
            net.calibrate(calib.inputs)
        lr = cfg.schedule.at(epoch)
        rng = np.random.default_rng([seed, epoch, 1 << 20])
        tasks, noises, totals = [], [], []
        for b, idx in enumerate(batches(len(data), cfg.batch_size, rng)):
            inj = NoiseInjector(net.sigma, seed, epoch, b)
            task, noise, total, g = search_losses(net, data.inputs[idx], data.labels[idx], cfg, inj, mode)
            if not np.isfinite(total):
                raise NumericalError(f"search loss became {total} in epoch {epoch}", state=last_good)
            grads = net.backward(g)
            opt.step(grads, lr)
            net.sigma -= lr * sigma_total_grad(net, grads.sigma, cfg)
            if not params_finite(net):
                raise NumericalError(f"parameters became non-finite in epoch {epoch}", state=last_good)
            tasks.append(task)
            noises.append(noise)
            totals.append(total)
        row = {"epoch": epoch, "task_loss": float(np.mean(tasks)), "noise_loss": float(np.mean(noises)),
               "total_loss": float(np.mean(totals))}
        row.update({f"sigma_{i}": float(s) for i, s in enumerate(net.sigma)})
        rows.append(row)
        log.info("search epoch %d: L_T %.4f L_N %.4f sigma %s", epoch, row["task_loss"], row["noise_loss"],
                 np.round(net.sigma, 3))
        last_good = net.copy()
    if calib is not None and mode != "float":
        net.calibrate(calib.inputs)
    return SearchResult(net, rows)


def write_search_log(rows: list[dict], path, n_layers: int) -> None:
    cols = ["epoch", "task_loss", "noise_loss", "total_loss"] + [f"sigma_{i}" for i in range(n_layers)]
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def config_dict(cfg: NoiseConfig) -> dict:
    return asdict(cfg)
