"""Per-tensor affine int8 quantization with min-max calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMAX = 255
SCALE_FLOOR = 1e-8
MODES = ("activation-unsigned", "weight-affine")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point must be in [0, {QMAX}], got {self.zero_point}")

    def quantize(self, v) -> np.ndarray:
        q = np.rint(np.asarray(v, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, 0, QMAX).astype(np.uint8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale

    def fake_quant(self, v) -> np.ndarray:
        return self.dequantize(self.quantize(v))

    def to_dict(self):
        return {"scale": self.scale, "zero_point": self.zero_point}


def calibrate(t, mode: str) -> QuantParams:
    """Min-max calibration. Activations use ``[0, max]``; weights ``[min, max]``
    widened to include zero so that 0.0 is exactly representable."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0 or not np.all(np.isfinite(t)):
        raise ValueError("cannot calibrate on an empty or non-finite tensor")
    if mode == "activation-unsigned":
        lo, hi = 0.0, max(float(t.max()), 0.0)
    elif mode == "weight-affine":
        lo, hi = min(float(t.min()), 0.0), max(float(t.max()), 0.0)
    else:
        raise ValueError(f"unknown quantization mode {mode!r}; expected one of {MODES}")
    scale = max((hi - lo) / QMAX, SCALE_FLOOR)
    zero_point = int(np.clip(np.rint(-lo / scale), 0, QMAX))
    return QuantParams(scale, zero_point)


def quantize(t, mode: str) -> tuple[np.ndarray, QuantParams]:
    qp = calibrate(t, mode)
    return qp.quantize(t), qp
