"""Symmetric INT4 fixed-point quantization.

The approximate path stores its learned parameters as 4-bit codes plus one
per-tensor scale. Accumulation happens in regular float64; only operand
storage is 4-bit, which is what the cost model charges for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CODE_MIN = -8
CODE_MAX = 7


def require_finite(a, name: str = "tensor") -> np.ndarray:
    """Return ``a`` as float64 after rejecting NaN/Inf entries."""
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def round_half_away(a: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (platform independent)."""
    a = np.asarray(a, dtype=np.float64)
    return np.copysign(np.floor(np.abs(a) + 0.5), a)


@dataclass(frozen=True)
class QuantTensor:
    """4-bit signed codes with one positive scale (value per code unit)."""

    codes: np.ndarray  # int8
    scale: float

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.int8)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scale", float(self.scale))
        if codes.size and (codes.min() < CODE_MIN or codes.max() > CODE_MAX):
            raise ValueError(f"codes outside [{CODE_MIN}, {CODE_MAX}]")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be a positive finite real")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def quantize_sym(t, bits: int = 4) -> QuantTensor:
    """Quantize to symmetric 4-bit codes with per-tensor scale max|t|/7.

    A zero tensor gets scale 1. Rounding is half-away-from-zero, so the
    largest-magnitude entries always map to code magnitude 7; code -8 is
    never produced here (it only exists for codes read back from files).
    """
    if bits != 4:
        raise ValueError("only 4-bit quantization is supported")
    arr = require_finite(t, "quantize input")
    max_abs = float(np.max(np.abs(arr))) if arr.size else 0.0
    scale = 1.0 if max_abs == 0.0 else max_abs / 7.0
    codes = np.clip(round_half_away(arr / scale), CODE_MIN, CODE_MAX)
    return QuantTensor(codes=codes.astype(np.int8), scale=scale)


def dequantize(q: QuantTensor) -> np.ndarray:
    """Codes times scale, as float64, shape preserved."""
    return q.codes.astype(np.float64) * q.scale
