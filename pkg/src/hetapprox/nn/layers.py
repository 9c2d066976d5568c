"""Layers of the numpy network engine.

Weight-bearing layers express their computation as a matrix product on
"columns": one row per output position holding that neuron's receptive field
(``fan_in`` values). The float, fake-quantized and integer paths all share
this view, which is also what the error model samples from.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..approx_mult import SIZE, ErrorMap


def int_accumulate(xq, wq, zx: int, zw: int) -> np.ndarray:
    """Exact int8 affine accumulation ``sum_k (x - zx) * (w - zw)``.

    ``xq`` is (M, K), ``wq`` is (C, K); returns (M, C) int64. Raw products are
    formed in float64, which is exact below 2**53.
    """
    xq = np.asarray(xq)
    wq = np.asarray(wq)
    k = xq.shape[1]
    raw = np.rint(xq.astype(np.float64) @ wq.astype(np.float64).T).astype(np.int64)
    xs = xq.sum(axis=1, dtype=np.int64)[:, None]
    ws = wq.sum(axis=1, dtype=np.int64)[None, :]
    return raw - zw * xs - zx * ws + k * zx * zw


def error_sum(xq, wq, emap: ErrorMap, chunk: int = 1 << 22) -> np.ndarray:
    """Aggregate error ``sum_k e(x_mk, w_ck)`` for every (row m, neuron c)."""
    xq = np.asarray(xq, dtype=np.int64)
    wq = np.asarray(wq, dtype=np.int64)
    m, k = xq.shape
    c = wq.shape[0]
    out = np.zeros((m, c), dtype=np.int64)
    if emap.is_accurate or m == 0:
        return out
    flat = emap.errors.ravel()
    wt = wq.T[None, :, :]  # (1, K, C)
    rows = max(1, chunk // max(1, k * c))
    for s in range(0, m, rows):
        idx = xq[s:s + rows, :, None] * SIZE + wt
        out[s:s + rows] = flat[idx].sum(axis=1, dtype=np.int64)
    return out


class Layer:
    kind = "layer"
    has_weights = False

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def spec(self) -> dict:
        return {"kind": self.kind}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size

    def spec(self):
        return {"kind": self.kind, "size": self.size}

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        oh, ow = h // s, w // s
        self._in_shape = x.shape
        blocks = x[:, :, :oh * s, :ow * s].reshape(n, c, oh, s, ow, s).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, oh, ow, s * s)
        self._argmax = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, h, w = self._in_shape
        s = self.size
        oh, ow = g.shape[2], g.shape[3]
        blocks = np.zeros((n, c, oh, ow, s * s), dtype=g.dtype)
        np.put_along_axis(blocks, self._argmax[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, oh, ow, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * s, ow * s)
        dx = np.zeros(self._in_shape, dtype=g.dtype)
        dx[:, :, :oh * s, :ow * s] = blocks
        return dx


class ComputeLayer(Layer):
    """Base for layers whose output is ``columns(x) @ W.T + b``."""

    has_weights = True

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray):
        self.name = name
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.assigned_map: ErrorMap | None = None
        self.fan_in = int(np.prod(self.weight.shape[1:]))
        self.mult_count = 0  # set by the network once the input shape is known

    @property
    def out_units(self) -> int:
        return self.weight.shape[0]

    @property
    def w2(self) -> np.ndarray:
        return self.weight.reshape(self.out_units, -1)

    def columns(self, x) -> np.ndarray:
        raise NotImplementedError

    def fold(self, y_cols, batch: int) -> np.ndarray:
        raise NotImplementedError

    def unfold(self, g) -> np.ndarray:
        raise NotImplementedError

    def columns_backward(self, dcols) -> np.ndarray:
        raise NotImplementedError


class Dense(ComputeLayer):
    kind = "dense"

    def spec(self):
        return {"kind": self.kind, "name": self.name, "in_features": self.fan_in, "out_features": self.out_units}

    def output_shape(self, in_shape):
        if in_shape != (self.fan_in,):
            raise ValueError(f"{self.name}: expected input shape ({self.fan_in},), got {in_shape}")
        return (self.out_units,)

    def columns(self, x):
        return x

    def fold(self, y_cols, batch):
        return y_cols

    def unfold(self, g):
        return g

    def columns_backward(self, dcols):
        return dcols


class Conv2d(ComputeLayer):
    kind = "conv2d"

    def __init__(self, name, weight, bias, padding: int = 0, stride: int = 1):
        super().__init__(name, weight, bias)
        self.padding = padding
        self.stride = stride

    def spec(self):
        out_ch, in_ch, kh, _ = self.weight.shape
        return {
            "kind": self.kind, "name": self.name, "in_channels": in_ch, "out_channels": out_ch,
            "kernel": kh, "padding": self.padding, "stride": self.stride,
        }

    def output_shape(self, in_shape):
        c, h, w = in_shape
        _, in_ch, kh, kw = self.weight.shape
        if c != in_ch:
            raise ValueError(f"{self.name}: expected {in_ch} input channels, got {c}")
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return (self.out_units, oh, ow)

    def columns(self, x):
        p, s = self.padding, self.stride
        _, _, kh, kw = self.weight.shape
        self._x_shape = x.shape
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        self._out_hw = (oh, ow)
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)

    def fold(self, y_cols, batch):
        oh, ow = self._out_hw
        return y_cols.reshape(batch, oh, ow, -1).transpose(0, 3, 1, 2)

    def unfold(self, g):
        return g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])

    def columns_backward(self, dcols):
        n, c, h, w = self._x_shape
        p, s = self.padding, self.stride
        _, _, kh, kw = self.weight.shape
        oh, ow = self._out_hw
        d = dcols.reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx[:, :, p:p + h, p:p + w] if p else dx


def layer_from_spec(spec: dict, rng: np.random.Generator | None = None) -> Layer:
    """Build a layer from its spec; weight-bearing layers get He-uniform init."""
    kind = spec["kind"]
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "maxpool":
        return MaxPool2d(spec.get("size", 2))
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "dense":
        fan_in, out = spec["in_features"], spec["out_features"]
        shape = (out, fan_in)
    elif kind == "conv2d":
        k = spec["kernel"]
        fan_in = spec["in_channels"] * k * k
        shape = (spec["out_channels"], spec["in_channels"], k, k)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    bound = np.sqrt(6.0 / fan_in)
    weight = rng.uniform(-bound, bound, size=shape)
    bias = np.zeros(shape[0])
    if kind == "dense":
        return Dense(spec["name"], weight, bias)
    return Conv2d(spec["name"], weight, bias, padding=spec.get("padding", 0), stride=spec.get("stride", 1))
