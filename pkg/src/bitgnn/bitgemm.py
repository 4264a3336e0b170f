"""Any-bitwidth GEMM composed from an 8x128x8 one-bit AND+popcount tile kernel.

A 1-bit matrix product accumulates ``popcount(a_word & b_word)`` over the four
shared 32-bit words of each 8x128 left tile against 8-column right chunks.
Higher bitwidths are composed per plane pair: plane i of the left operand times
plane j of the right contributes with weight ``2**(i+j)``, grouped by bit index
and reduced with shifts in 64-bit before narrowing to int32 (overflow raises,
never wraps).

Two scheduling knobs, both output-invariant:

* ``jump`` skips left-operand tiles whose 32 words OR to zero; skipped tiles
  are never read by the MMA loop.
* ``reuse`` picks the loop order: ``cross-bit`` re-fetches a left tile for
  every opposing plane, ``cross-tile`` fetches it once and reduces across all
  planes before moving on.

Every kernel invocation records exact operation counts, retrievable with
:func:`op_counters`. Counters are thread-local and all kernels are pure
functions of immutable operands, so concurrent invocations on disjoint outputs
are safe.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .bitpack import COLUMN_WISE, ROW_WISE, BitPlaneStack, PackedBitMatrix, pack_planes
from .errors import ReductionOverflowError, ShapeError
from .quantize import QuantParams, bit_decompose, quantize_matrix

CROSS_BIT = "cross-bit"
CROSS_TILE = "cross-tile"

TILE_ROWS = 8
TILE_COLS = 8
TILE_K_BITS = 128
TILE_K_WORDS = TILE_K_BITS // 32

_INT32_MAX = 2**31 - 1
_INT32_MIN = -(2**31)


def _popcount_inplace(v: np.ndarray) -> np.ndarray:
    v -= (v >> 1) & np.uint32(0x55555555)
    v = (v & np.uint32(0x33333333)) + ((v >> 2) & np.uint32(0x33333333))
    v += v >> 4
    v &= np.uint32(0x0F0F0F0F)
    v *= np.uint32(0x01010101)
    v >>= 24
    return v


def popcount32(v) -> np.ndarray:
    """Per-element set-bit count of a uint32 array."""
    return _popcount_inplace(np.array(v, dtype=np.uint32, copy=True))


@dataclass(eq=False)
class TileMap:
    """Zero/non-zero flags per (row-tile, col-tile); True marks an all-zero tile."""

    row_tiles: int
    col_tiles: int
    flags: np.ndarray


@dataclass
class OpCounters:
    """Exact per-invocation work counts for the last kernel call on this thread."""

    tile_mma_count: int = 0
    tile_fetch_count: int = 0
    tiles_skipped: int = 0
    word_and_popcount_count: int = 0
    tiles_total: int = 0

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(
            self.tile_mma_count + other.tile_mma_count,
            self.tile_fetch_count + other.tile_fetch_count,
            self.tiles_skipped + other.tiles_skipped,
            self.word_and_popcount_count + other.word_and_popcount_count,
            self.tiles_total + other.tiles_total,
        )


_tls = threading.local()


def op_counters() -> OpCounters:
    """Counters of the most recent kernel invocation on the calling thread."""
    last = getattr(_tls, "last", None)
    if last is None:
        raise RuntimeError("no bit-GEMM kernel has run on this thread yet")
    return replace(last)


@dataclass
class BatchNormParams:
    """Per-output-column batch-norm statistics and affine parameters."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        n = len(self.mean)
        if any(len(a) != n for a in (self.var, self.gamma, self.beta)):
            raise ValueError("batch-norm parameter vectors disagree on length")
        if not (self.var + self.eps > 0).all():
            raise ValueError("Var + eps must be positive for every column")


@dataclass
class EpilogueSpec:
    """Fused post-processing of an integer accumulator.

    Dequantization reconstructs real values from the integer product using the
    operands' quantization grids: a left code a and right code b stand for
    ``alpha_min + scale * code``, so the product needs the cross terms built
    from per-row sums of the left codes and per-column sums of the right codes
    (``None`` params mark an exact integer operand like a 1-bit adjacency,
    contributing offset 0 and scale 1). Then: bias add, batch-norm, activation
    (``kind``), and optionally requantization to ``out_params`` with bit-plane
    re-decomposition.
    """

    kind: str = "none"
    lhs_params: QuantParams | None = None
    rhs_params: QuantParams | None = None
    lhs_row_sums: np.ndarray | None = None
    rhs_col_sums: np.ndarray | None = None
    inner_dim: int = 0
    bias: np.ndarray | None = None
    bn: BatchNormParams | None = None
    out_params: QuantParams | None = None

    def __post_init__(self):
        if self.kind not in ("none", "relu", "tanh", "batch-norm"):
            raise ValueError(f"unknown epilogue kind {self.kind!r}")
        if self.kind == "batch-norm" and self.bn is None:
            raise ValueError("kind='batch-norm' requires bn parameters")


def _dequantize(acc: np.ndarray, epi: EpilogueSpec) -> np.ndarray:
    # Term grouping, and skipping terms whose alpha_min is zero, are part of
    # the contract: the unfused references in the tests mirror this exact
    # float64 expression.
    ama, sa = (0.0, 1.0)
    if epi.lhs_params is not None:
        ama, sa = epi.lhs_params.alpha_min, epi.lhs_params.scale
    amb, sb = (0.0, 1.0)
    if epi.rhs_params is not None:
        amb, sb = epi.rhs_params.alpha_min, epi.rhs_params.scale
    real = (sa * sb) * acc.astype(np.float64)
    if amb != 0.0:
        if epi.lhs_row_sums is None:
            raise ValueError("rhs alpha_min != 0 requires lhs_row_sums")
        rows = np.asarray(epi.lhs_row_sums, dtype=np.float64)
        real = real + (sa * amb) * rows[:, None]
    if ama != 0.0:
        if epi.rhs_col_sums is None:
            raise ValueError("lhs alpha_min != 0 requires rhs_col_sums")
        cols = np.asarray(epi.rhs_col_sums, dtype=np.float64)
        real = real + (sb * ama) * cols[None, :]
    if ama != 0.0 and amb != 0.0:
        real = real + (float(epi.inner_dim) * ama) * amb
    return real


def apply_epilogue(acc, epi: EpilogueSpec, *, out_orientation: str = ROW_WISE,
                   out_pad_to: int = 8):
    """Dequantize, bias, batch-norm, activate, optionally requantize.

    Returns a float64 matrix, or a :class:`BitPlaneStack` when
    ``epi.out_params`` is set. The fused path inside the GEMM calls this same
    function, so fused and standalone epilogues are bit-exact by construction.
    """
    acc = np.asarray(acc)
    real = _dequantize(acc, epi)
    if epi.bias is not None:
        bias = np.asarray(epi.bias, dtype=np.float64)
        if bias.shape != (acc.shape[1],):
            raise ValueError("bias length must match output columns")
        real = real + bias[None, :]
    if epi.bn is not None:
        bn = epi.bn
        if len(bn.mean) != acc.shape[1]:
            raise ValueError("batch-norm column count must match output columns")
        real = ((real - bn.mean[None, :]) / np.sqrt(bn.var + bn.eps)[None, :]) \
            * bn.gamma[None, :] + bn.beta[None, :]
    if epi.kind == "relu":
        real = np.maximum(real, 0.0)
    elif epi.kind == "tanh":
        # Evaluated at float32 precision; no tighter contract exists.
        real = np.tanh(real).astype(np.float32).astype(np.float64)
    if epi.out_params is None:
        return real
    qm = quantize_matrix(real, epi.out_params)
    return pack_planes(bit_decompose(qm), out_orientation, pad_to=out_pad_to)


def scan_zero_tiles(a: PackedBitMatrix) -> TileMap:
    """Flag all-zero 8x128 tiles of a column-wise packed 1-bit matrix.

    The scan is pure and its result is cached on the (immutable) operand, so
    repeated kernel calls against the same matrix scan once.
    """
    if a.orientation != COLUMN_WISE:
        raise ShapeError("zero-tile scan expects a column-wise operand")
    if a._tilemap is not None:
        return a._tilemap
    rt = a.padded_rows // TILE_ROWS
    ct = a.padded_cols // TILE_K_BITS
    if rt and ct:
        grouped = a.words2d.reshape(rt, TILE_ROWS, ct, TILE_K_WORDS)
        ors = np.bitwise_or.reduce(grouped, axis=(1, 3))
    else:
        ors = np.ones((rt, ct), dtype=np.uint32)
    tm = TileMap(row_tiles=rt, col_tiles=ct, flags=(ors == 0))
    a._tilemap = tm
    return tm


def mma_tile_1bit(a_tile, b_tile, acc) -> np.ndarray:
    """One 8x128x8 tile MMA: ``acc[i,j] += sum_w popcount(a[i,w] & b[w,j])``.

    ``a_tile`` is (8, 4) words, ``b_tile`` (4, 8) words (word w of column j at
    ``b_tile[w, j]``), ``acc`` an 8x8 integer accumulator updated in place.
    """
    a = np.asarray(a_tile, dtype=np.uint32)
    b = np.asarray(b_tile, dtype=np.uint32)
    acc = np.asarray(acc)
    if a.shape != (TILE_ROWS, TILE_K_WORDS):
        raise ShapeError(f"a_tile must be (8, 4) words, got {a.shape}")
    if b.shape != (TILE_K_WORDS, TILE_COLS):
        raise ShapeError(f"b_tile must be (4, 8) words, got {b.shape}")
    if acc.shape != (TILE_ROWS, TILE_COLS):
        raise ShapeError(f"acc must be (8, 8), got {acc.shape}")
    prod = _popcount_inplace(np.bitwise_and(a[:, None, :], b.T[None, :, :]))
    acc += prod.sum(axis=2, dtype=np.uint32).astype(acc.dtype)
    return acc


def _block_product(a_blk: np.ndarray, b_blk: np.ndarray) -> np.ndarray:
    # a_blk (R, 4) x b_blk (C, 4) words -> (R, C) popcount inner products.
    prod = _popcount_inplace(np.bitwise_and(a_blk[:, None, :], b_blk[None, :, :]))
    return prod.sum(axis=2, dtype=np.uint32)


def _tile_columns(plane: PackedBitMatrix, jump: bool):
    """Per tile-column: (row index array or None for all, active tile count)."""
    rt = plane.padded_rows // TILE_ROWS
    tj_count = plane.padded_cols // TILE_K_BITS
    if not jump:
        return [(None, rt)] * tj_count, 0
    flags = scan_zero_tiles(plane).flags
    out = []
    for tj in range(tj_count):
        active = np.nonzero(~flags[:, tj])[0]
        if len(active) == rt:
            out.append((None, rt))
        elif len(active) == 0:
            out.append((None, 0))
        else:
            idx = (active[:, None] * TILE_ROWS + np.arange(TILE_ROWS)).ravel()
            out.append((idx, len(active)))
    return out, int(flags.sum())


def _narrow_int32(total: np.ndarray) -> np.ndarray:
    if total.size and (total.max() > _INT32_MAX or total.min() < _INT32_MIN):
        peak = int(total.max())
        raise ReductionOverflowError(
            f"reduced value {peak} does not fit a signed 32-bit output"
        )
    return total.astype(np.int32)


def reduce_bitplanes(plane_accs) -> np.ndarray:
    """Shifted 64-bit reduction ``sum_p acc_p << p``, narrowed to int32."""
    if not len(plane_accs):
        raise ValueError("nothing to reduce")
    total = np.zeros(np.asarray(plane_accs[0]).shape, dtype=np.int64)
    for p, acc in enumerate(plane_accs):
        total += np.asarray(acc, dtype=np.int64) << p
    return _narrow_int32(total)


def _check_reuse(reuse: str):
    if reuse not in (CROSS_BIT, CROSS_TILE):
        raise ValueError(f"reuse must be {CROSS_BIT!r} or {CROSS_TILE!r}")


def bmm_1bit_by_nbit(a: PackedBitMatrix, x: BitPlaneStack, *, jump: bool = True,
                     reuse: str = CROSS_TILE) -> list[np.ndarray]:
    """1-bit by s-bit product: plane p of the result is ``A @ plane_p(X)``.

    ``a`` is column-wise packed, ``x`` row-wise with the same padded reduction
    axis. Returns one int32 matrix per input plane, logical dims. Outputs are
    bitwise identical across all jump/reuse combinations.
    """
    _check_reuse(reuse)
    if a.orientation != COLUMN_WISE:
        raise ShapeError("left operand must be column-wise packed")
    if x.orientation != ROW_WISE:
        raise ShapeError("right operand must be row-wise packed")
    if a.padded_cols != x.padded_rows or a.logical_cols != x.logical_rows:
        raise ShapeError(
            f"shared dims mismatch: {a.logical_rows}x{a.logical_cols} vs "
            f"{x.logical_rows}x{x.logical_cols}"
        )
    s = x.bits
    mp, ml = a.padded_rows, a.logical_rows
    np_, nl = x.padded_cols, x.logical_cols
    a2 = a.words2d
    b2 = [p.words2d for p in x.planes]
    tj_count = a.padded_cols // TILE_K_BITS
    rt = mp // TILE_ROWS
    n_chunks = np_ // TILE_COLS

    accs = [np.zeros((mp, np_), dtype=np.uint32) for _ in range(s)]
    columns, skipped = _tile_columns(a, jump)
    mma = fetches = words = 0

    def compute(plane: int, tj: int, idx, nt: int):
        nonlocal mma, words
        lo = tj * TILE_K_WORDS
        a_blk = a2[:, lo:lo + 4] if idx is None else a2[idx, lo:lo + 4]
        prod = _block_product(a_blk, b2[plane][:, lo:lo + 4])
        if idx is None:
            accs[plane] += prod
        else:
            accs[plane][idx] += prod
        mma += nt * n_chunks
        words += nt * n_chunks * (TILE_ROWS * TILE_COLS * TILE_K_WORDS)

    if reuse == CROSS_TILE:
        for tj, (idx, nt) in enumerate(columns):
            if nt == 0:
                continue
            fetches += nt
            for p in range(s):
                compute(p, tj, idx, nt)
    else:
        for p in range(s):
            for tj, (idx, nt) in enumerate(columns):
                if nt == 0:
                    continue
                fetches += nt
                compute(p, tj, idx, nt)

    _tls.last = OpCounters(
        tile_mma_count=mma,
        tile_fetch_count=fetches,
        tiles_skipped=skipped,
        word_and_popcount_count=words,
        tiles_total=rt * tj_count,
    )
    return [acc[:ml, :nl].astype(np.int32) for acc in accs]


def gemm_sbit_by_tbit(x: BitPlaneStack, w: BitPlaneStack, out: str = "int32",
                      epi: EpilogueSpec | None = None, *, jump: bool = True,
                      reuse: str = CROSS_TILE, out_orientation: str = ROW_WISE,
                      out_pad_to: int = 8, clock=None):
    """s-bit by t-bit product ``sum_{i,j} (plane_i(X) @ plane_j(W)) << (i+j)``.

    ``x`` is column-wise packed, ``w`` row-wise. ``out="int32"`` returns the
    raw integer accumulator (requires ``epi=None``); ``out="bitplanes"``
    applies the epilogue and requantizes to ``epi.out_params`` in the same
    pass. Per-plane partial sums accumulate in uint32; the shifted cross-plane
    reduction runs in 64-bit and overflow of the int32 output raises.
    """
    _check_reuse(reuse)
    if out not in ("int32", "bitplanes"):
        raise ValueError(f"out must be 'int32' or 'bitplanes', got {out!r}")
    if x.orientation != COLUMN_WISE:
        raise ShapeError("left stack must be column-wise packed")
    if w.orientation != ROW_WISE:
        raise ShapeError("right stack must be row-wise packed")
    if not (1 <= x.bits <= 8 and 1 <= w.bits <= 8):
        raise ValueError("operand bit counts must be in [1, 8]")
    if x.padded_cols != w.padded_rows or x.logical_cols != w.logical_rows:
        raise ShapeError(
            f"inner dims mismatch: {x.logical_rows}x{x.logical_cols} vs "
            f"{w.logical_rows}x{w.logical_cols}"
        )
    s, t = x.bits, w.bits
    mp, ml = x.padded_rows, x.logical_rows
    np_, nl = w.padded_cols, w.logical_cols
    x2 = [p.words2d for p in x.planes]
    w2 = [p.words2d for p in w.planes]
    tj_count = x.padded_cols // TILE_K_BITS
    rt = mp // TILE_ROWS
    n_chunks = np_ // TILE_COLS

    groups = [np.zeros((mp, np_), dtype=np.int64) for _ in range(s + t - 1)]
    mma = fetches = words = skipped = 0

    def pair_product(i: int, j: int, tj: int, idx, nt: int, partial: np.ndarray):
        nonlocal mma, words
        lo = tj * TILE_K_WORDS
        a_blk = x2[i][:, lo:lo + 4] if idx is None else x2[i][idx, lo:lo + 4]
        prod = _block_product(a_blk, w2[j][:, lo:lo + 4])
        if idx is None:
            partial += prod
        else:
            partial[idx] += prod
        mma += nt * n_chunks
        words += nt * n_chunks * (TILE_ROWS * TILE_COLS * TILE_K_WORDS)

    if reuse == CROSS_TILE:
        for i in range(s):
            columns, plane_skipped = _tile_columns(x.planes[i], jump)
            skipped += plane_skipped
            partials = [np.zeros((mp, np_), dtype=np.uint32) for _ in range(t)]
            for tj, (idx, nt) in enumerate(columns):
                if nt == 0:
                    continue
                fetches += nt
                for j in range(t):
                    pair_product(i, j, tj, idx, nt, partials[j])
            for j in range(t):
                groups[i + j] += partials[j]
    else:
        plane_columns = [_tile_columns(pl, jump) for pl in x.planes]
        skipped = sum(sk for _, sk in plane_columns)
        for j in range(t):
            for i in range(s):
                partial = np.zeros((mp, np_), dtype=np.uint32)
                for tj, (idx, nt) in enumerate(plane_columns[i][0]):
                    if nt == 0:
                        continue
                    fetches += nt
                    pair_product(i, j, tj, idx, nt, partial)
                groups[i + j] += partial

    total = np.zeros((mp, np_), dtype=np.int64)
    for b, g in enumerate(groups):
        total += g << b
    acc = _narrow_int32(total[:ml, :nl])

    _tls.last = OpCounters(
        tile_mma_count=mma,
        tile_fetch_count=fetches,
        tiles_skipped=skipped,
        word_and_popcount_count=words,
        tiles_total=s * rt * tj_count,
    )

    if out == "int32":
        if epi is not None:
            raise ValueError("out='int32' returns the raw accumulator; "
                             "apply the epilogue separately or use out='bitplanes'")
        return acc
    if epi is None or epi.out_params is None:
        raise ValueError("out='bitplanes' requires an epilogue with out_params")
    t0 = time.perf_counter()
    result = apply_epilogue(acc, epi, out_orientation=out_orientation,
                            out_pad_to=out_pad_to)
    if clock is not None:
        clock["epilogue"] = clock.get("epilogue", 0.0) + (time.perf_counter() - t0)
    return result
