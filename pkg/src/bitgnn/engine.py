"""Quantized GNN forward passes over subgraph batches.

A layer runs as two packed-GEMM stages. In aggregate-then-update order the
adjacency product comes first: per-plane 1-bit products are shift-reduced,
dequantized with row degrees, requantized onto the stage grid and repacked;
the update GEMM then applies the fused epilogue (bias, batch-norm, activation)
and either requantizes (hidden layers) or emits full-precision logits (last
layer). update-then-aggregate swaps the stages; bias always rides with the
update stage, batch-norm and activation with the layer-final stage. Hidden
activations travel between layers only as packed bit planes.

Weight quantization, column sums, and bit-plane packing are computed once per
model and cached; the adjacency tile scan is cached on the batch operand.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .bitgemm import (
    CROSS_TILE,
    BatchNormParams,
    EpilogueSpec,
    OpCounters,
    apply_epilogue,
    bmm_1bit_by_nbit,
    gemm_sbit_by_tbit,
    op_counters,
    reduce_bitplanes,
)
from .bitpack import (
    COLUMN_WISE,
    ROW_WISE,
    BitPlaneStack,
    pack_planes,
    repack,
    to_planes,
    unpack,
)
from .errors import FormatError
from .graph import SubgraphBatch
from .quantize import QuantParams, bit_decompose, quantize_matrix, to_val

AGGREGATE_THEN_UPDATE = "aggregate-then-update"
UPDATE_THEN_AGGREGATE = "update-then-aggregate"

WEIGHTS_MAGIC = b"QGTW"
_WEIGHTS_HEADER = struct.Struct("<4sHH")
_LAYER_HEADER = struct.Struct("<II")
_LAYER_PARAMS = struct.Struct("<ddB")


@dataclass
class LayerConfig:
    """One GNN layer: weights, epilogue, stage order, and quantization grids."""

    in_dim: int
    out_dim: int
    weight: np.ndarray
    weight_params: QuantParams
    bias: np.ndarray | None = None
    activation: str = "none"
    bn: BatchNormParams | None = None
    order: str = AGGREGATE_THEN_UPDATE
    output_mode: str = "bitplanes"
    mid_params: QuantParams | None = None
    out_params: QuantParams | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.shape != (self.in_dim, self.out_dim):
            raise ValueError(
                f"weight shape {self.weight.shape} != ({self.in_dim}, {self.out_dim})"
            )
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.out_dim,):
                raise ValueError("bias length must equal out_dim")
        if self.activation not in ("none", "relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.order not in (AGGREGATE_THEN_UPDATE, UPDATE_THEN_AGGREGATE):
            raise ValueError(f"unknown stage order {self.order!r}")
        if self.output_mode not in ("bitplanes", "full-precision"):
            raise ValueError(f"unknown output mode {self.output_mode!r}")


@dataclass
class ModelConfig:
    """Ordered layers plus the model-wide bit widths."""

    layers: list[LayerConfig]
    kind: str
    feature_bits: int
    weight_bits: int
    _prepared: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("cluster-gcn", "batched-gin"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if not (1 <= self.feature_bits <= 8 and 1 <= self.weight_bits <= 8):
            raise ValueError("bit widths must be in [1, 8]")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.layers[-1].output_mode != "full-precision":
            raise ValueError("the last layer must emit full-precision output")
        for ly in self.layers[:-1]:
            if ly.output_mode != "bitplanes":
                raise ValueError("hidden layers must emit bit planes")


@dataclass
class ActivationState:
    """Packed activations between layers plus their integer codes and grid."""

    stack: BitPlaneStack
    values: np.ndarray
    params: QuantParams


@dataclass
class KernelTally:
    """Aggregated kernel counters; aggregation-phase calls tracked separately."""

    total: OpCounters = field(default_factory=OpCounters)
    aggregation: OpCounters = field(default_factory=OpCounters)

    def add(self, c: OpCounters, *, aggregation: bool = False) -> None:
        self.total = self.total + c
        if aggregation:
            self.aggregation = self.aggregation + c


@dataclass
class _PreparedLayer:
    w_stack: BitPlaneStack
    w_col_sums: np.ndarray


def _prepare_layer(layer: LayerConfig) -> _PreparedLayer:
    qm = quantize_matrix(layer.weight, layer.weight_params)
    col_sums = qm.values.sum(axis=0, dtype=np.int64)
    # Hidden-layer results feed another packed GEMM, so their weight columns
    # pad to 128; the output layer only needs the 8-column tile chunks.
    pad_to = 128 if layer.output_mode == "bitplanes" else 8
    stack = pack_planes(bit_decompose(qm), ROW_WISE, pad_to=pad_to)
    return _PreparedLayer(w_stack=stack, w_col_sums=col_sums)


def _prepared(model: ModelConfig) -> list[_PreparedLayer]:
    if model._prepared is None:
        model._prepared = [_prepare_layer(ly) for ly in model.layers]
    return model._prepared


def _entry_state(batch: SubgraphBatch) -> ActivationState:
    if batch.features is None or batch.x_params is None:
        raise ValueError("batch carries no quantized features")
    planes = to_planes(batch.features)
    return ActivationState(
        stack=batch.features, values=to_val(planes), params=batch.x_params
    )


def _oriented(stack: BitPlaneStack, orientation: str) -> BitPlaneStack:
    if stack.orientation == orientation:
        return stack
    return repack(stack, orientation, pad_to=8)


def _add_time(clock, phase: str, dt: float) -> None:
    if clock is not None:
        clock[phase] = clock.get(phase, 0.0) + dt


def _tally(tally, *, aggregation: bool) -> None:
    if tally is not None:
        tally.add(op_counters(), aggregation=aggregation)


def _timed_gemm(clock, *args, **kwargs):
    before = clock.get("epilogue", 0.0) if clock is not None else 0.0
    t0 = time.perf_counter()
    out = gemm_sbit_by_tbit(*args, clock=clock, **kwargs)
    if clock is not None:
        epi_dt = clock.get("epilogue", 0.0) - before
        _add_time(clock, "update", time.perf_counter() - t0 - epi_dt)
    return out


def _requant_state(real: np.ndarray, params: QuantParams, orientation: str
                   ) -> tuple[ActivationState, np.ndarray]:
    qm = quantize_matrix(real, params)
    stack = pack_planes(bit_decompose(qm), orientation, pad_to=8)
    row_sums = qm.values.sum(axis=1, dtype=np.int64)
    state = ActivationState(stack=stack, values=qm.values.astype(np.int32),
                            params=params)
    return state, row_sums


def layer_forward(batch: SubgraphBatch, layer: LayerConfig,
                  state: ActivationState | None = None,
                  prep: _PreparedLayer | None = None, *,
                  jump: bool = True, reuse: str = CROSS_TILE,
                  clock=None, tally: KernelTally | None = None):
    """Run one layer; returns an ActivationState (hidden) or float64 logits."""
    if state is None:
        state = _entry_state(batch)
    if prep is None:
        prep = _prepare_layer(layer)
    if state.params.bits != state.stack.bits:
        raise ValueError("activation grid and stack bit counts disagree")
    if state.stack.logical_cols != layer.in_dim:
        raise ValueError(
            f"layer expects {layer.in_dim} input dims, got {state.stack.logical_cols}"
        )
    if layer.mid_params is None:
        raise ValueError("layer.mid_params is unset; calibrate or set explicitly")
    if layer.output_mode == "bitplanes" and layer.out_params is None:
        raise ValueError("hidden layers need out_params; calibrate or set explicitly")
    opts = {"jump": jump, "reuse": reuse}
    if layer.order == AGGREGATE_THEN_UPDATE:
        return _aggregate_then_update(batch, layer, state, prep, opts, clock, tally)
    return _update_then_aggregate(batch, layer, state, prep, opts, clock, tally)


def _aggregate_then_update(batch, layer, state, prep, opts, clock, tally):
    t0 = time.perf_counter()
    accs = bmm_1bit_by_nbit(batch.adjacency, _oriented(state.stack, ROW_WISE), **opts)
    agg = reduce_bitplanes(accs)
    _add_time(clock, "aggregate", time.perf_counter() - t0)
    _tally(tally, aggregation=True)

    t0 = time.perf_counter()
    epi_agg = EpilogueSpec(
        kind="none",
        rhs_params=state.params,
        lhs_row_sums=batch.degrees(),
        inner_dim=batch.total_nodes,
    )
    real = apply_epilogue(agg, epi_agg)
    mid_state, mid_row_sums = _requant_state(real, layer.mid_params, COLUMN_WISE)
    _add_time(clock, "epilogue", time.perf_counter() - t0)

    epi_up = EpilogueSpec(
        kind=layer.activation,
        lhs_params=layer.mid_params,
        rhs_params=layer.weight_params,
        lhs_row_sums=mid_row_sums,
        rhs_col_sums=prep.w_col_sums,
        inner_dim=layer.in_dim,
        bias=layer.bias,
        bn=layer.bn,
        out_params=layer.out_params if layer.output_mode == "bitplanes" else None,
    )
    if layer.output_mode == "bitplanes":
        out_stack = _timed_gemm(clock, mid_state.stack, prep.w_stack, "bitplanes",
                                epi_up, out_orientation=ROW_WISE, **opts)
        _tally(tally, aggregation=False)
        values = to_val(to_planes(out_stack))
        return ActivationState(stack=out_stack, values=values,
                               params=layer.out_params)
    acc = _timed_gemm(clock, mid_state.stack, prep.w_stack, "int32", None, **opts)
    _tally(tally, aggregation=False)
    t0 = time.perf_counter()
    logits = apply_epilogue(acc, epi_up)
    _add_time(clock, "epilogue", time.perf_counter() - t0)
    return logits


def _update_then_aggregate(batch, layer, state, prep, opts, clock, tally):
    row_sums = state.values.sum(axis=1, dtype=np.int64)
    epi_up = EpilogueSpec(
        kind="none",
        lhs_params=state.params,
        rhs_params=layer.weight_params,
        lhs_row_sums=row_sums,
        rhs_col_sums=prep.w_col_sums,
        inner_dim=layer.in_dim,
        bias=layer.bias,
        out_params=layer.mid_params,
    )
    mid_stack = _timed_gemm(clock, _oriented(state.stack, COLUMN_WISE), prep.w_stack,
                            "bitplanes", epi_up, out_orientation=ROW_WISE, **opts)
    _tally(tally, aggregation=False)

    t0 = time.perf_counter()
    accs = bmm_1bit_by_nbit(batch.adjacency, mid_stack, **opts)
    agg = reduce_bitplanes(accs)
    _add_time(clock, "aggregate", time.perf_counter() - t0)
    _tally(tally, aggregation=True)

    t0 = time.perf_counter()
    epi_agg = EpilogueSpec(
        kind=layer.activation,
        rhs_params=layer.mid_params,
        lhs_row_sums=batch.degrees(),
        inner_dim=batch.total_nodes,
        bn=layer.bn,
        out_params=layer.out_params if layer.output_mode == "bitplanes" else None,
    )
    if layer.output_mode == "bitplanes":
        out = apply_epilogue(agg, epi_agg, out_orientation=COLUMN_WISE)
        values = to_val(to_planes(out))
        _add_time(clock, "epilogue", time.perf_counter() - t0)
        return ActivationState(stack=out, values=values, params=layer.out_params)
    logits = apply_epilogue(agg, epi_agg)
    _add_time(clock, "epilogue", time.perf_counter() - t0)
    return logits


def model_forward(batch: SubgraphBatch, model: ModelConfig, *,
                  jump: bool = True, reuse: str = CROSS_TILE,
                  clock=None, tally: KernelTally | None = None) -> np.ndarray:
    """Chain all layers over one batch; returns float64 logits."""
    preps = _prepared(model)
    state = _entry_state(batch)
    out = None
    for layer, prep in zip(model.layers, preps):
        out = layer_forward(batch, layer, state, prep, jump=jump, reuse=reuse,
                            clock=clock, tally=tally)
        if isinstance(out, ActivationState):
            state = out
    return out


def reference_forward_f32(batch: SubgraphBatch, features, model: ModelConfig
                          ) -> np.ndarray:
    """Plain float32 pipeline on the same graph and weights (no quantization)."""
    a = unpack(batch.adjacency).astype(np.float32)
    h = np.asarray(features, dtype=np.float32)
    if h.shape != (batch.total_nodes, model.layers[0].in_dim):
        raise ValueError("features must be batch-local (total_nodes x in_dim)")
    for layer in model.layers:
        w = layer.weight.astype(np.float32)
        if layer.order == AGGREGATE_THEN_UPDATE:
            h = a @ h
            h = h @ w
            if layer.bias is not None:
                h = h + layer.bias.astype(np.float32)[None, :]
        else:
            h = h @ w
            if layer.bias is not None:
                h = h + layer.bias.astype(np.float32)[None, :]
            h = a @ h
        if layer.bn is not None:
            bn = layer.bn
            h = ((h - bn.mean[None, :]) / np.sqrt(bn.var + bn.eps)[None, :]) \
                * bn.gamma[None, :] + bn.beta[None, :]
            h = h.astype(np.float32)
        if layer.activation == "relu":
            h = np.maximum(h, np.float32(0.0))
        elif layer.activation == "tanh":
            h = np.tanh(h)
    return h


def _grid(lo: float, hi: float, bits: int) -> QuantParams:
    if hi <= lo:
        hi = lo + 1.0
    return QuantParams(float(lo), float(hi), bits)


def calibrate_model(model: ModelConfig, batch: SubgraphBatch, features) -> None:
    """Fill per-layer requantization grids from one float reference pass.

    Stage grids track the real-valued ranges the quantized path will see at
    each requantization point; the grid bit count is the model's feature
    width. Explicitly set grids are overwritten.
    """
    a = unpack(batch.adjacency).astype(np.float64)
    h = np.asarray(features, dtype=np.float64)
    bits = model.feature_bits
    for layer in model.layers:
        if layer.order == AGGREGATE_THEN_UPDATE:
            mid = a @ h
            out = mid @ layer.weight
            if layer.bias is not None:
                out = out + layer.bias[None, :]
        else:
            mid = h @ layer.weight
            if layer.bias is not None:
                mid = mid + layer.bias[None, :]
            out = a @ mid
        layer.mid_params = _grid(mid.min(), mid.max(), bits)
        if layer.bn is not None:
            bn = layer.bn
            out = ((out - bn.mean[None, :]) / np.sqrt(bn.var + bn.eps)[None, :]) \
                * bn.gamma[None, :] + bn.beta[None, :]
        if layer.activation == "relu":
            out = np.maximum(out, 0.0)
        elif layer.activation == "tanh":
            out = np.tanh(out)
        if layer.output_mode == "bitplanes":
            layer.out_params = _grid(out.min(), out.max(), bits)
        h = out
    model._prepared = None


def _uniform_layers(dims, *, order, feature_bits, weight_bits, seed,
                    weight_range, with_bias):
    rng = np.random.default_rng(seed)
    lo, hi = weight_range
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(LayerConfig(
            in_dim=d_in,
            out_dim=d_out,
            weight=rng.uniform(lo, hi, size=(d_in, d_out)),
            weight_params=QuantParams(lo, hi, weight_bits),
            bias=rng.uniform(-0.1, 0.1, size=d_out) if with_bias else None,
            activation="none" if last else "relu",
            order=order,
            output_mode="full-precision" if last else "bitplanes",
        ))
    return layers


def gcn_model(in_dim: int, num_classes: int, *, hidden_dim: int = 16,
              num_layers: int = 3, feature_bits: int = 4, weight_bits: int = 4,
              seed: int = 0, weight_range=(-0.5, 0.5),
              with_bias: bool = True) -> ModelConfig:
    """Cluster-GCN preset: aggregate-then-update, 16 hidden dims by default."""
    dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]
    layers = _uniform_layers(dims, order=AGGREGATE_THEN_UPDATE,
                             feature_bits=feature_bits, weight_bits=weight_bits,
                             seed=seed, weight_range=weight_range,
                             with_bias=with_bias)
    return ModelConfig(layers=layers, kind="cluster-gcn",
                       feature_bits=feature_bits, weight_bits=weight_bits)


def gin_model(in_dim: int, num_classes: int, *, hidden_dim: int = 64,
              num_layers: int = 3, feature_bits: int = 4, weight_bits: int = 4,
              seed: int = 0, weight_range=(-0.5, 0.5),
              with_bias: bool = True) -> ModelConfig:
    """Batched-GIN preset: update-then-aggregate, 64 hidden dims by default."""
    dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [num_classes]
    layers = _uniform_layers(dims, order=UPDATE_THEN_AGGREGATE,
                             feature_bits=feature_bits, weight_bits=weight_bits,
                             seed=seed, weight_range=weight_range,
                             with_bias=with_bias)
    return ModelConfig(layers=layers, kind="batched-gin",
                       feature_bits=feature_bits, weight_bits=weight_bits)


def save_weights(model: ModelConfig, path) -> None:
    """Write layer weights as: magic QGTW, u16 version, u16 layer count, then
    per layer u32 dims, f64 alpha bounds + u8 bits, f32 row-major weights, and
    a flagged optional f32 bias vector."""
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, 1, len(model.layers)))
        for ly in model.layers:
            fh.write(_LAYER_HEADER.pack(ly.in_dim, ly.out_dim))
            p = ly.weight_params
            fh.write(_LAYER_PARAMS.pack(p.alpha_min, p.alpha_max, p.bits))
            fh.write(ly.weight.astype("<f4").tobytes())
            if ly.bias is not None:
                fh.write(b"\x01" + ly.bias.astype("<f4").tobytes())
            else:
                fh.write(b"\x00")


def load_weights(model: ModelConfig, path) -> None:
    """Load externally trained weights into a model of matching shape."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _WEIGHTS_HEADER.size:
        raise FormatError("weight payload shorter than header")
    magic, version, count = _WEIGHTS_HEADER.unpack_from(data)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad weights magic {magic!r}")
    if version != 1:
        raise FormatError(f"unsupported weights version {version}")
    if count != len(model.layers):
        raise FormatError(f"file has {count} layers, model has {len(model.layers)}")
    off = _WEIGHTS_HEADER.size
    try:
        for ly in model.layers:
            d_in, d_out = _LAYER_HEADER.unpack_from(data, off)
            off += _LAYER_HEADER.size
            if (d_in, d_out) != (ly.in_dim, ly.out_dim):
                raise FormatError(
                    f"layer dims {(d_in, d_out)} != model {(ly.in_dim, ly.out_dim)}"
                )
            amin, amax, bits = _LAYER_PARAMS.unpack_from(data, off)
            off += _LAYER_PARAMS.size
            n = d_in * d_out
            w = np.frombuffer(data, dtype="<f4", count=n, offset=off)
            off += 4 * n
            has_bias = data[off]
            off += 1
            bias = None
            if has_bias:
                bias = np.frombuffer(data, dtype="<f4", count=d_out, offset=off)
                off += 4 * d_out
            ly.weight = w.astype(np.float64).reshape(d_in, d_out)
            ly.weight_params = QuantParams(amin, amax, bits)
            ly.bias = bias.astype(np.float64) if bias is not None else None
    except struct.error:
        raise FormatError("truncated weight payload") from None
    if off != len(data):
        raise FormatError("trailing bytes in weight payload")
    model._prepared = None
