"""Sequential network with float, fake-quantized and integer execution paths."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .layers import ComputeLayer, Layer, error_sum, int_accumulate, layer_from_spec
from .quant import QuantParams, calibrate

MODES = ("float", "fakequant", "int", "approx")
CHECKPOINT_FORMAT = "hetapprox-net-v1"


@dataclass
class Gradients:
    weight: dict[str, np.ndarray]
    bias: dict[str, np.ndarray]
    sigma: np.ndarray


@dataclass
class LayerCapture:
    """Quantized operands seen by one compute layer on some inputs."""

    name: str
    xq: np.ndarray  # (M, fan_in) uint8 receptive fields
    wq: np.ndarray  # (out_units, fan_in) uint8
    x_qp: QuantParams
    w_qp: QuantParams
    n_inputs: int

    @property
    def out_scale(self) -> float:
        """Multiplier from integer accumulator units to float pre-activation units."""
        return self.x_qp.scale * self.w_qp.scale

    def accumulate(self, emap=None) -> np.ndarray:
        acc = int_accumulate(self.xq, self.wq, self.x_qp.zero_point, self.w_qp.zero_point)
        if emap is not None:
            acc = acc + error_sum(self.xq, self.wq, emap)
        return acc


def weight_quant(layer: ComputeLayer) -> tuple[np.ndarray, QuantParams]:
    qp = calibrate(layer.w2, "weight-affine")
    return qp.quantize(layer.w2), qp


@dataclass
class QuantNetwork:
    layers: list[Layer]
    input_shape: tuple
    act_quant: dict[str, QuantParams] = field(default_factory=dict)
    sigma: np.ndarray | None = None
    rng_seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        names = [l.name for l in self.compute_layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"compute layer names must be unique: {names}")
        shape = self.input_shape
        for layer in self.layers:
            out = layer.output_shape(shape)
            if isinstance(layer, ComputeLayer):
                n_out = int(np.prod(out))
                layer.mult_count = layer.fan_in * n_out
            shape = out
        self.output_shape = shape
        n = len(self.compute_layers)
        self.sigma = np.zeros(n) if self.sigma is None else np.asarray(self.sigma, dtype=np.float64).copy()
        if self.sigma.shape != (n,):
            raise ConfigError(f"need one sigma per compute layer ({n}), got {self.sigma.shape}")
        self._tape = None

    # ------------------------------------------------------------------ info

    @property
    def compute_layers(self) -> list[ComputeLayer]:
        return [l for l in self.layers if isinstance(l, ComputeLayer)]

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.compute_layers]

    @property
    def mult_counts(self) -> np.ndarray:
        return np.array([l.mult_count for l in self.compute_layers], dtype=np.int64)

    def copy(self) -> QuantNetwork:
        tape, self._tape = self._tape, None
        try:
            return copy.deepcopy(self)
        finally:
            self._tape = tape

    def assign(self, maps) -> None:
        """Attach one error map per compute layer (list in layer order or dict by name)."""
        layers = self.compute_layers
        if isinstance(maps, dict):
            missing = set(self.layer_names) - set(maps)
            if missing:
                raise ConfigError(f"no multiplier assigned for layers {sorted(missing)}")
            maps = [maps[l.name] for l in layers]
        if len(maps) != len(layers):
            raise ConfigError(f"expected {len(layers)} multipliers, got {len(maps)}")
        for layer, m in zip(layers, maps):
            layer.assigned_map = m

    # --------------------------------------------------------------- forward

    def forward(self, x, mode: str = "float", noise=None, record: bool = False) -> np.ndarray:
        """Run the network.

        ``noise`` is an optional injector called as ``noise(j, y)`` on the
        pre-activation of compute layer ``j``; it must also provide
        ``backward(j, grad)``. ``record`` keeps what ``backward`` needs.
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match network input {self.input_shape}")
        if mode != "float":
            missing = [l.name for l in self.compute_layers if l.name not in self.act_quant]
            if missing:
                raise ConfigError(f"network is not calibrated (layers {missing})")
        if mode == "approx":
            unassigned = [l.name for l in self.compute_layers if l.assigned_map is None]
            if unassigned:
                raise ConfigError(f"no multiplier assigned for layers {unassigned}")
        tape = []
        batch = x.shape[0]
        j = 0
        for layer in self.layers:
            if isinstance(layer, ComputeLayer):
                x, entry = self._compute(layer, x, mode, batch)
                if noise is not None:
                    x = noise(j, x)
                tape.append(entry)
                j += 1
            else:
                x = layer.forward(x)
                tape.append(None)
        self._tape = (tape, noise) if record else None
        return x

    def _compute(self, layer: ComputeLayer, x, mode, batch):
        cols = layer.columns(x)
        if mode == "float":
            xc, wc = cols, layer.w2
            y = xc @ wc.T + layer.bias
        elif mode == "fakequant":
            xc = self.act_quant[layer.name].fake_quant(cols)
            wq, w_qp = weight_quant(layer)
            wc = w_qp.dequantize(wq)
            y = xc @ wc.T + layer.bias
        else:
            x_qp = self.act_quant[layer.name]
            xq = x_qp.quantize(cols)
            wq, w_qp = weight_quant(layer)
            acc = int_accumulate(xq, wq, x_qp.zero_point, w_qp.zero_point)
            if mode == "approx":
                acc += error_sum(xq, wq, layer.assigned_map)
            s = x_qp.scale * w_qp.scale
            bq = np.clip(np.rint(layer.bias / s), -(2**31), 2**31 - 1).astype(np.int64)
            y = (acc + bq) * s
            xc, wc = x_qp.dequantize(xq), w_qp.dequantize(wq)
        return layer.fold(y, batch), (xc, wc)

    # -------------------------------------------------------------- backward

    def backward(self, loss_grad) -> Gradients:
        """Backpropagate ``dL/dlogits`` through the last recorded forward.

        Quantization and approximate products are passed straight through:
        the gradient uses the dequantized operands as if the products were exact.
        """
        if self._tape is None:
            raise RuntimeError("backward called before a recorded forward pass")
        tape, noise = self._tape
        g = np.asarray(loss_grad, dtype=np.float64)
        gw, gb = {}, {}
        j = len(self.compute_layers)
        for layer, entry in zip(reversed(self.layers), reversed(tape)):
            if isinstance(layer, ComputeLayer):
                j -= 1
                if noise is not None:
                    g = noise.backward(j, g)
                xc, wc = entry
                gc = layer.unfold(g)
                gw[layer.name] = (gc.T @ xc).reshape(layer.weight.shape)
                gb[layer.name] = gc.sum(axis=0)
                g = layer.columns_backward(gc @ wc)
            else:
                g = layer.backward(g)
        sigma = noise.sigma_grad() if noise is not None else np.zeros_like(self.sigma)
        return Gradients(gw, gb, sigma)

    # ------------------------------------------------------------ quantized

    def compute_inputs(self, x, batch_size: int = 256):
        """Float inputs reaching each compute layer (accurate float path), concatenated over batches."""
        out = {l.name: [] for l in self.compute_layers}
        for s in range(0, len(x), batch_size):
            h = np.asarray(x[s:s + batch_size], dtype=np.float64)
            for layer in self.layers:
                if isinstance(layer, ComputeLayer):
                    out[layer.name].append(h)
                    h = layer.fold(layer.columns(h) @ layer.w2.T + layer.bias, h.shape[0])
                else:
                    h = layer.forward(h)
        return {k: np.concatenate(v) for k, v in out.items()}

    def calibrate(self, x) -> None:
        """Min-max calibrate every compute layer's input quantizer on ``x``.

        Inputs that can be negative (raw features into the first layer) get a
        full affine range instead of the unsigned ``[0, max]`` one.
        """
        inputs = self.compute_inputs(x)
        self.act_quant = {
            name: calibrate(v, "activation-unsigned" if v.min() >= 0 else "weight-affine")
            for name, v in inputs.items()
        }

    def capture(self, x, batch_size: int = 256) -> dict[str, LayerCapture]:
        """Quantized receptive fields and weights of every compute layer on the
        accurate integer path."""
        layers = self.compute_layers
        parts = {l.name: [] for l in layers}
        for s in range(0, len(x), batch_size):
            h = np.asarray(x[s:s + batch_size], dtype=np.float64)
            for layer in self.layers:
                if isinstance(layer, ComputeLayer):
                    parts[layer.name].append(self.act_quant[layer.name].quantize(layer.columns(h)))
                    h, _ = self._compute(layer, h, "int", h.shape[0])
                else:
                    h = layer.forward(h)
        caps = {}
        for layer in layers:
            wq, w_qp = weight_quant(layer)
            caps[layer.name] = LayerCapture(
                layer.name, np.concatenate(parts[layer.name]), wq,
                self.act_quant[layer.name], w_qp, len(x),
            )
        return caps

    def preactivations(self, x, batch_size: int = 256, mode: str = "int") -> dict[str, np.ndarray]:
        """Pre-activation outputs of each compute layer, one row per output neuron position."""
        out = {l.name: [] for l in self.compute_layers}
        for s in range(0, len(x), batch_size):
            h = np.asarray(x[s:s + batch_size], dtype=np.float64)
            for layer in self.layers:
                if isinstance(layer, ComputeLayer):
                    h, _ = self._compute(layer, h, mode, h.shape[0])
                    out[layer.name].append(h.ravel())
                else:
                    h = layer.forward(h)
        return {k: np.concatenate(v) for k, v in out.items()}

    # ------------------------------------------------------------ checkpoint

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            spec = layer.spec()
            if isinstance(layer, ComputeLayer):
                spec["weight"] = layer.weight.ravel().tolist()
                spec["bias"] = layer.bias.ravel().tolist()
            layers.append(spec)
        return {
            "format": CHECKPOINT_FORMAT,
            "input_shape": list(self.input_shape),
            "layers": layers,
            "act_quant": {k: v.to_dict() for k, v in self.act_quant.items()},
            "sigma": self.sigma.tolist(),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> QuantNetwork:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a network checkpoint (format {d.get('format')!r})")
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            weight = spec.pop("weight", None)
            bias = spec.pop("bias", None)
            layer = layer_from_spec(spec)
            if isinstance(layer, ComputeLayer):
                layer.weight = np.asarray(weight, dtype=np.float64).reshape(layer.weight.shape)
                layer.bias = np.asarray(bias, dtype=np.float64).reshape(layer.bias.shape)
            layers.append(layer)
        act = {k: QuantParams(v["scale"], v["zero_point"]) for k, v in d.get("act_quant", {}).items()}
        return cls(layers, tuple(d["input_shape"]), act, np.asarray(d["sigma"]), int(d.get("rng_seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> QuantNetwork:
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_network(specs: list[dict], input_shape, seed: int = 0) -> QuantNetwork:
    rng = np.random.default_rng(seed)
    return QuantNetwork([layer_from_spec(s, rng) for s in specs], tuple(input_shape), rng_seed=seed)


def forward_accurate(net: QuantNetwork, batch) -> np.ndarray:
    return net.forward(batch, mode="int")


def forward_approx(net: QuantNetwork, batch) -> np.ndarray:
    return net.forward(batch, mode="approx")


def backward(net: QuantNetwork, loss_grad) -> Gradients:
    return net.backward(loss_grad)
