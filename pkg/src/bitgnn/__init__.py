"""Bit-serial quantized GNN inference on commodity CPUs.

Any-bitwidth matrix products are composed from 1-bit AND+popcount tile
operations over bit-plane-decomposed operands, with zero-tile jumping,
non-zero-tile reuse, fused epilogues, and block-diagonal subgraph batching.
"""

from .bitgemm import (
    CROSS_BIT,
    CROSS_TILE,
    BatchNormParams,
    EpilogueSpec,
    OpCounters,
    TileMap,
    apply_epilogue,
    bmm_1bit_by_nbit,
    gemm_sbit_by_tbit,
    mma_tile_1bit,
    op_counters,
    popcount32,
    reduce_bitplanes,
    scan_zero_tiles,
)
from .bitpack import (
    COLUMN_WISE,
    ROW_WISE,
    BitPlaneStack,
    PackedBitMatrix,
    deserialize,
    pack_colwise,
    pack_planes,
    pack_rowwise,
    pad8,
    pad128,
    repack,
    serialize,
    to_planes,
    unpack,
)
from .engine import (
    ActivationState,
    KernelTally,
    LayerConfig,
    ModelConfig,
    calibrate_model,
    gcn_model,
    gin_model,
    layer_forward,
    load_weights,
    model_forward,
    reference_forward_f32,
    save_weights,
)
from .errors import DataError, FormatError, ReductionOverflowError, ShapeError
from .graph import (
    CompoundBuffer,
    Graph,
    PartitionAssignment,
    SubgraphBatch,
    build_batch,
    edge_cut,
    export_partition,
    float32_dense_bytes,
    import_partition,
    load_graph,
    pack_batch,
    partition,
    save_graph,
    unpack_batch,
)
from .quantize import (
    QuantMatrix,
    QuantParams,
    bit_decompose,
    quantize_matrix,
    quantize_scalar,
    to_val,
)

__version__ = "0.1.0"
