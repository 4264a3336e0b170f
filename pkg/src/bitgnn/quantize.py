"""Uniform quantization to unsigned q-bit integers and bit-plane decomposition.

A real value ``alpha`` is placed on the grid ``floor((alpha - alpha_min) / scale)``
with ``scale = (alpha_max - alpha_min) / 2**q``, clamped into ``[0, 2**q - 1]``.
A quantized matrix can be split into q one-bit planes (plane i holds bit i of
every element, bit 0 least significant) and recomposed exactly as
``sum_i 2**i * plane_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MAX_BITS = 8


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor quantization grid over [alpha_min, alpha_max)."""

    alpha_min: float
    alpha_max: float
    bits: int
    scale: float = field(init=False)

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if not (math.isfinite(self.alpha_min) and math.isfinite(self.alpha_max)):
            raise ValueError("alpha bounds must be finite")
        if not self.alpha_max > self.alpha_min:
            raise ValueError(
                f"alpha_max ({self.alpha_max}) must exceed alpha_min ({self.alpha_min})"
            )
        object.__setattr__(
            self, "scale", (self.alpha_max - self.alpha_min) / (1 << self.bits)
        )

    @property
    def max_value(self) -> int:
        return (1 << self.bits) - 1

    def dequantize_offset_scale(self) -> tuple[float, float]:
        """(offset, step) such that a code v represents offset + step * v."""
        return self.alpha_min, self.scale


@dataclass(eq=False)
class QuantMatrix:
    """Dense matrix of unsigned q-bit codes, row-major."""

    rows: int
    cols: int
    values: np.ndarray
    bits: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.rows, self.cols):
            raise ValueError("values shape does not match declared dims")
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        if self.values.size and (
            self.values.min() < 0 or self.values.max() > (1 << self.bits) - 1
        ):
            raise ValueError(f"values exceed the {self.bits}-bit range")

    def __eq__(self, other):
        return (
            isinstance(other, QuantMatrix)
            and self.rows == other.rows
            and self.cols == other.cols
            and self.bits == other.bits
            and np.array_equal(self.values, other.values)
        )


def quantize_scalar(alpha: float, p: QuantParams) -> int:
    """Map one real value onto the unsigned grid of ``p``.

    Out-of-range inputs clamp to the grid ends, so the result is monotone
    non-decreasing in ``alpha`` and always within ``[0, 2**bits - 1]``.
    """
    v = math.floor((alpha - p.alpha_min) / p.scale)
    return min(max(v, 0), p.max_value)


def quantize_matrix(m, p: QuantParams) -> QuantMatrix:
    """Elementwise :func:`quantize_scalar` over a 2-D real matrix."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={a.ndim}")
    bad = ~np.isfinite(a)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"non-finite value at ({r}, {c})")
    # Same float64 expression as quantize_scalar, so the two agree bit for bit.
    v = np.floor((a - p.alpha_min) / p.scale)
    v = np.clip(v, 0, p.max_value).astype(np.uint8)
    return QuantMatrix(rows=a.shape[0], cols=a.shape[1], values=v, bits=p.bits)


def bit_decompose(qm: QuantMatrix) -> np.ndarray:
    """Split into ``bits`` one-bit planes, shape (bits, rows, cols), plane i = bit i."""
    shifts = np.arange(qm.bits, dtype=np.uint8)
    values = qm.values.astype(np.uint8)
    return ((values[None, :, :] >> shifts[:, None, None]) & 1).astype(np.uint8)


def to_val(planes) -> np.ndarray:
    """Recompose bit planes into the quantized integer matrix (int32).

    Exact inverse of :func:`bit_decompose` on its image.
    """
    try:
        p = np.asarray(planes, dtype=np.uint8)
    except ValueError as exc:
        raise ValueError(f"inconsistent plane dims: {exc}") from None
    if p.ndim != 3:
        raise ValueError(f"expected (bits, rows, cols) planes, got ndim={p.ndim}")
    if not 1 <= p.shape[0] <= 64:
        raise ValueError(f"unsupported plane count {p.shape[0]}")
    weights = np.left_shift(np.int64(1), np.arange(p.shape[0], dtype=np.int64))
    return (p.astype(np.int64) * weights[:, None, None]).sum(axis=0).astype(np.int32)
