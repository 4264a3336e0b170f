"""Stacked one-bit planes packed into 32-bit words with tile-friendly padding.

Two layouts exist, both packing bits along the GEMM reduction axis:

* column-wise (left operands): word ``r * (padded_cols/32) + w`` holds row r,
  columns ``[32w, 32w+32)``; rows pad to a multiple of 8 or 128, columns to 128.
* row-wise (right operands): word ``c * (padded_rows/32) + w`` holds column c,
  rows ``[32w, 32w+32)``; rows pad to 128, columns to a multiple of 8 or 128.

Bit j of a word is the matrix bit at offset ``32w + j`` (little-endian at bit
granularity). All padding bits are zero. Row padding of a left operand and
column padding of a right operand select 8 or 128 depending on whether the
product feeds another packed GEMM; the shared reduction axis always pads to 128
so packed operands line up with the 8x128 tile kernel.

The serialized form (little-endian integers) is: magic ``QGTC``, u16 version,
u8 orientation (0 column-wise, 1 row-wise), u8 bits, u32 logical_rows, u32
logical_cols, u32 padded_rows, u32 padded_cols, then ``bits`` planes of u32
words, plane 0 first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError

WORD_BITS = 32
COLUMN_WISE = "column-wise"
ROW_WISE = "row-wise"

MAGIC = b"QGTC"
VERSION = 1
_HEADER = struct.Struct("<4sHBBIIII")


def pad8(n: int) -> int:
    """Smallest multiple of 8 that is >= n (0 stays 0)."""
    if n < 0:
        raise ValueError("dimension must be non-negative")
    return -(-n // 8) * 8


def pad128(n: int) -> int:
    """Smallest multiple of 128 that is >= n (0 stays 0)."""
    if n < 0:
        raise ValueError("dimension must be non-negative")
    return -(-n // 128) * 128


def _pad_to(n: int, multiple: int) -> int:
    if multiple not in (8, 128):
        raise ValueError(f"padding multiple must be 8 or 128, got {multiple}")
    return pad8(n) if multiple == 8 else pad128(n)


@dataclass(eq=False)
class PackedBitMatrix:
    """One bit plane packed into a flat array of 32-bit words."""

    orientation: str
    logical_rows: int
    logical_cols: int
    padded_rows: int
    padded_cols: int
    words: np.ndarray
    _tilemap: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.orientation not in (COLUMN_WISE, ROW_WISE):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        self.words = np.ascontiguousarray(self.words, dtype=np.uint32).ravel()
        expect = self.padded_rows * self.padded_cols // WORD_BITS
        if len(self.words) != expect:
            raise FormatError(
                f"word count {len(self.words)} != padded {self.padded_rows}x"
                f"{self.padded_cols}/32 = {expect}"
            )

    @property
    def words2d(self) -> np.ndarray:
        """(padded_rows, words-per-row) view for column-wise, transposed for row-wise."""
        if self.orientation == COLUMN_WISE:
            return self.words.reshape(self.padded_rows, self.padded_cols // WORD_BITS)
        return self.words.reshape(self.padded_cols, self.padded_rows // WORD_BITS)

    def __eq__(self, other):
        return (
            isinstance(other, PackedBitMatrix)
            and self.orientation == other.orientation
            and self.logical_rows == other.logical_rows
            and self.logical_cols == other.logical_cols
            and self.padded_rows == other.padded_rows
            and self.padded_cols == other.padded_cols
            and np.array_equal(self.words, other.words)
        )


@dataclass(eq=False)
class BitPlaneStack:
    """q bit planes of one matrix, identically packed and padded."""

    bits: int
    planes: list[PackedBitMatrix]

    def __post_init__(self):
        if self.bits != len(self.planes):
            raise ValueError(f"bits={self.bits} but {len(self.planes)} planes")
        if not self.planes:
            raise ValueError("a stack needs at least one plane")
        first = self.planes[0]
        for p in self.planes[1:]:
            if (
                p.orientation != first.orientation
                or p.logical_rows != first.logical_rows
                or p.logical_cols != first.logical_cols
                or p.padded_rows != first.padded_rows
                or p.padded_cols != first.padded_cols
            ):
                raise ValueError("planes disagree on orientation or padding")

    @property
    def orientation(self) -> str:
        return self.planes[0].orientation

    @property
    def logical_rows(self) -> int:
        return self.planes[0].logical_rows

    @property
    def logical_cols(self) -> int:
        return self.planes[0].logical_cols

    @property
    def padded_rows(self) -> int:
        return self.planes[0].padded_rows

    @property
    def padded_cols(self) -> int:
        return self.planes[0].padded_cols

    def __eq__(self, other):
        return (
            isinstance(other, BitPlaneStack)
            and self.bits == other.bits
            and all(a == b for a, b in zip(self.planes, other.planes))
        )


def _as_binary(plane) -> np.ndarray:
    a = np.asarray(plane)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got ndim={a.ndim}")
    if a.size and ((a != 0) & (a != 1)).any():
        bad = np.argwhere((a != 0) & (a != 1))[0]
        raise DataError(f"non-binary entry at ({bad[0]}, {bad[1]})")
    return a.astype(np.uint8)


def _pack_bytes_to_words(packed_bytes: np.ndarray) -> np.ndarray:
    # packbits output is C-contiguous uint8 with a last axis divisible by 4.
    words = packed_bytes.view("<u4")
    return np.ascontiguousarray(words, dtype=np.uint32).ravel()


def pack_colwise(plane, pad_rows_to: int = 8) -> PackedBitMatrix:
    """Pack a 0/1 matrix column-wise: per-row words along the column axis."""
    a = _as_binary(plane)
    rows, cols = a.shape
    pr = _pad_to(rows, pad_rows_to)
    pc = pad128(cols)
    padded = np.zeros((pr, pc), dtype=np.uint8)
    padded[:rows, :cols] = a
    packed = np.packbits(padded, axis=1, bitorder="little")
    return PackedBitMatrix(COLUMN_WISE, rows, cols, pr, pc, _pack_bytes_to_words(packed))


def pack_rowwise(plane, pad_cols_to: int = 8) -> PackedBitMatrix:
    """Pack a 0/1 matrix row-wise: per-column words along the row axis."""
    a = _as_binary(plane)
    rows, cols = a.shape
    pr = pad128(rows)
    pc = _pad_to(cols, pad_cols_to)
    padded = np.zeros((pr, pc), dtype=np.uint8)
    padded[:rows, :cols] = a
    packed = np.packbits(padded, axis=0, bitorder="little")  # (pr/8, pc)
    packed = np.ascontiguousarray(packed.T)  # (pc, pr/8)
    return PackedBitMatrix(ROW_WISE, rows, cols, pr, pc, _pack_bytes_to_words(packed))


def unpack(p: PackedBitMatrix) -> np.ndarray:
    """Recover the logical 0/1 matrix, discarding padding."""
    expect = p.padded_rows * p.padded_cols // WORD_BITS
    if len(p.words) != expect:
        raise FormatError("word count inconsistent with padded dims")
    as_bytes = np.ascontiguousarray(p.words.astype("<u4")).view(np.uint8)
    if p.orientation == COLUMN_WISE:
        if p.padded_rows == 0:
            return np.zeros((0, p.logical_cols), dtype=np.uint8)
        byte_rows = as_bytes.reshape(p.padded_rows, p.padded_cols // 8)
        bits = np.unpackbits(byte_rows, axis=1, bitorder="little")
        return bits[: p.logical_rows, : p.logical_cols]
    if p.padded_cols == 0:
        return np.zeros((p.logical_rows, 0), dtype=np.uint8)
    byte_cols = as_bytes.reshape(p.padded_cols, p.padded_rows // 8)
    bits = np.unpackbits(byte_cols, axis=1, bitorder="little")
    return bits.T[: p.logical_rows, : p.logical_cols]


def pack_planes(planes, orientation: str, pad_to: int = 8) -> BitPlaneStack:
    """Pack (bits, rows, cols) logical planes into a stack.

    ``pad_to`` selects the padding of the non-reduction axis (rows for
    column-wise, columns for row-wise); the other axis always pads to 128.
    """
    arr = np.asarray(planes, dtype=np.uint8)
    if arr.ndim != 3:
        raise ValueError(f"expected (bits, rows, cols) planes, got ndim={arr.ndim}")
    if orientation == COLUMN_WISE:
        packed = [pack_colwise(pl, pad_rows_to=pad_to) for pl in arr]
    elif orientation == ROW_WISE:
        packed = [pack_rowwise(pl, pad_cols_to=pad_to) for pl in arr]
    else:
        raise ValueError(f"unknown orientation {orientation!r}")
    return BitPlaneStack(bits=arr.shape[0], planes=packed)


def to_planes(stack: BitPlaneStack) -> np.ndarray:
    """Unpack a stack to logical (bits, rows, cols) planes."""
    return np.stack([unpack(p) for p in stack.planes])


def repack(stack: BitPlaneStack, orientation: str, pad_to: int = 8) -> BitPlaneStack:
    """Re-orient a stack (exact; goes through the logical planes)."""
    return pack_planes(to_planes(stack), orientation, pad_to=pad_to)


def serialize(stack: BitPlaneStack) -> bytes:
    """Byte-exact, little-endian image of a stack (format in module docstring)."""
    first = stack.planes[0]
    orient = 0 if first.orientation == COLUMN_WISE else 1
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        orient,
        stack.bits,
        first.logical_rows,
        first.logical_cols,
        first.padded_rows,
        first.padded_cols,
    )
    body = b"".join(p.words.astype("<u4").tobytes() for p in stack.planes)
    return header + body


def deserialize(data: bytes) -> BitPlaneStack:
    """Inverse of :func:`serialize`; raises FormatError on malformed payloads."""
    if len(data) < _HEADER.size:
        raise FormatError("payload shorter than header")
    magic, version, orient, bits, lr, lc, pr, pc = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if orient not in (0, 1):
        raise FormatError(f"bad orientation byte {orient}")
    if not 1 <= bits <= 64:
        raise FormatError(f"bad plane count {bits}")
    words_per_plane = pr * pc // WORD_BITS
    expect = _HEADER.size + bits * words_per_plane * 4
    if len(data) != expect:
        raise FormatError(f"payload length {len(data)} != expected {expect}")
    orientation = COLUMN_WISE if orient == 0 else ROW_WISE
    planes = []
    off = _HEADER.size
    for _ in range(bits):
        raw = np.frombuffer(data, dtype="<u4", count=words_per_plane, offset=off)
        off += words_per_plane * 4
        planes.append(
            PackedBitMatrix(orientation, lr, lc, pr, pc, raw.astype(np.uint32))
        )
    return BitPlaneStack(bits=bits, planes=planes)
