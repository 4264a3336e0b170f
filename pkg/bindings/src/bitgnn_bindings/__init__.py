"""Bit-tensor bindings: numeric arrays in, packed bit-plane handles out.

A :class:`BitTensorHandle` owns core-packed data (no duplicate array-side
representation); values materialize only at :func:`to_val`. Matrix products
delegate to the core any-bitwidth GEMM, so binding results are bitwise
identical to direct core-library calls on the same inputs.

Handles are not shareable across interpreter threads without external
locking. ``release()`` frees the packed planes eagerly; otherwise garbage
collection finalizes them.
"""

from __future__ import annotations

import numpy as np

from bitgnn import (
    COLUMN_WISE,
    ROW_WISE,
    QuantParams,
    bit_decompose,
    gemm_sbit_by_tbit,
    pack_planes,
    quantize_matrix,
    repack,
    to_planes,
)
from bitgnn import to_val as _planes_to_val

__all__ = ["BitTensorHandle", "to_bit", "to_val", "bitMM2Int", "bitMM2Bit"]
__version__ = "0.1.0"


class BitTensorHandle:
    """Opaque reference to a packed bit-plane stack and its quantization grid."""

    __slots__ = ("_stacks", "_params", "_shape")

    def __init__(self, stack, params: QuantParams, shape: tuple[int, int]):
        self._stacks = {stack.orientation: stack}
        self._params = params
        self._shape = shape

    @property
    def shape(self) -> tuple[int, int]:
        return self._shape

    @property
    def bits(self) -> int:
        return self._params.bits

    @property
    def params(self) -> QuantParams:
        return self._params

    def release(self) -> None:
        """Drop the packed planes; the handle becomes unusable."""
        self._stacks = None

    @property
    def released(self) -> bool:
        return self._stacks is None

    def _stack(self, orientation: str):
        if self._stacks is None:
            raise ValueError("handle has been released")
        if orientation not in self._stacks:
            have = next(iter(self._stacks.values()))
            self._stacks[orientation] = repack(have, orientation, pad_to=8)
        return self._stacks[orientation]

    def __repr__(self):
        state = "released" if self.released else f"{self.bits}-bit"
        return f"BitTensorHandle({self._shape[0]}x{self._shape[1]}, {state})"


def to_bit(array, nbits: int, *, alpha_min: float | None = None,
           alpha_max: float | None = None) -> BitTensorHandle:
    """Quantize a 2-D numeric array to nbits and pack it as bit planes.

    The grid defaults to the array's own [min, max) range.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got ndim={a.ndim}")
    if not 1 <= nbits <= 8:
        raise ValueError(f"nbits must be in [1, 8], got {nbits}")
    if alpha_min is None:
        lo = float(a.min()) if a.size else 0.0
    else:
        lo = float(alpha_min)
    if alpha_max is None:
        hi = float(a.max()) if a.size else 1.0
    else:
        hi = float(alpha_max)
    if hi <= lo:
        hi = lo + 1.0
    params = QuantParams(lo, hi, nbits)
    qm = quantize_matrix(a, params)
    stack = pack_planes(bit_decompose(qm), COLUMN_WISE, pad_to=8)
    return BitTensorHandle(stack, params, a.shape)


def to_val(h: BitTensorHandle) -> np.ndarray:
    """Decode a handle back to its quantized int32 codes."""
    return _planes_to_val(to_planes(h._stack(COLUMN_WISE)))


def bitMM2Int(a: BitTensorHandle, b: BitTensorHandle) -> np.ndarray:
    """Any-bitwidth matrix product with a full int32 result."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims mismatch: {a.shape} x {b.shape}")
    return gemm_sbit_by_tbit(a._stack(COLUMN_WISE), b._stack(ROW_WISE), "int32")


def bitMM2Bit(a: BitTensorHandle, b: BitTensorHandle, out_bits: int, *,
              alpha_min: float | None = None,
              alpha_max: float | None = None) -> BitTensorHandle:
    """Any-bitwidth matrix product requantized to an out_bits handle.

    The output grid defaults to the product's own value range.
    """
    acc = bitMM2Int(a, b)
    return to_bit(acc, out_bits, alpha_min=alpha_min, alpha_max=alpha_max)
