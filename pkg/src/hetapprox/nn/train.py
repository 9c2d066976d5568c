"""SGD training loops: float baseline, and straight-through approximate retraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NumericalError
from .network import QuantNetwork

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LRSchedule:
    lr: float
    decay: float = 1.0
    every: int = 1

    def at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.every)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def predict(net: QuantNetwork, x, mode: str = "int", batch_size: int = 256) -> np.ndarray:
    return np.concatenate([
        net.forward(x[s:s + batch_size], mode=mode).argmax(axis=1) for s in range(0, len(x), batch_size)
    ])


def accuracy(net: QuantNetwork, data, mode: str = "int", batch_size: int = 256) -> float:
    return float((predict(net, data.inputs, mode, batch_size) == data.labels).mean())


class SGD:
    def __init__(self, net: QuantNetwork, momentum: float = 0.0, weight_decay: float = 0.0):
        self.net = net
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, grads, lr: float) -> None:
        for layer in self.net.compute_layers:
            for attr, g in (("weight", grads.weight[layer.name]), ("bias", grads.bias[layer.name])):
                p = getattr(layer, attr)
                if self.weight_decay and attr == "weight":
                    g = g + self.weight_decay * p
                if self.momentum:
                    key = (layer.name, attr)
                    v = self._velocity.get(key)
                    v = g if v is None else self.momentum * v + g
                    self._velocity[key] = v
                    g = v
                p -= lr * g


def params_finite(net: QuantNetwork) -> bool:
    return all(np.isfinite(l.weight).all() and np.isfinite(l.bias).all() for l in net.compute_layers) \
        and bool(np.isfinite(net.sigma).all())


def train(
    net: QuantNetwork,
    data,
    epochs: int,
    schedule: LRSchedule,
    batch_size: int = 64,
    mode: str = "float",
    momentum: float = 0.0,
    seed: int = 0,
    calib=None,
) -> tuple[QuantNetwork, list[float]]:
    """Train a copy of ``net``; returns it with the per-epoch mean loss.

    If ``calib`` is given the activation quantizers are refreshed on it at the
    start of every epoch (needed by the quantized modes).
    """
    net = net.copy()
    if epochs <= 0:
        return net, []
    if len(data) == 0:
        raise ConfigError("training data is empty")
    opt = SGD(net, momentum=momentum)
    history = []
    last_good = net.copy()
    for epoch in range(epochs):
        if calib is not None:
            net.calibrate(calib.inputs)
        lr = schedule.at(epoch)
        rng = np.random.default_rng([seed, epoch])
        losses = []
        for idx in batches(len(data), batch_size, rng):
            logits = net.forward(data.inputs[idx], mode=mode, record=True)
            loss, g = softmax_cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"loss became {loss} in epoch {epoch}", state=last_good)
            opt.step(net.backward(g), lr)
            if not params_finite(net):
                raise NumericalError(f"parameters became non-finite in epoch {epoch}", state=last_good)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d (%s): loss %.4f", epoch, mode, history[-1])
        last_good = net.copy()
    return net, history


def retrain_ste(
    net: QuantNetwork,
    data,
    epochs: int = 5,
    schedule: LRSchedule = LRSchedule(1e-3, 0.9, 2),
    batch_size: int = 64,
    seed: int = 0,
    calib=None,
    momentum: float = 0.0,
) -> QuantNetwork:
    """Retrain with behavioral simulation of the assigned multipliers.

    The forward pass is bit-exact approximate integer inference; the backward
    pass treats every approximate, quantized product as an exact float one.
    """
    unassigned = [l.name for l in net.compute_layers if l.assigned_map is None]
    if unassigned:
        raise ConfigError(f"no multiplier assigned for layers {unassigned}")
    trained, _ = train(net, data, epochs, schedule, batch_size, "approx", momentum, seed, calib)
    return trained
