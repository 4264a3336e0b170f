"""Graph loading, partitioning, block-diagonal batching, and transfer buffers.

Batches concatenate induced subgraphs: cross-partition edges are dropped, so
the batch adjacency is block-diagonal by construction and its off-diagonal
8x128 tiles are all-zero. Adjacency row i holds the out-edges of batch node i
(``A @ X`` aggregates over out-neighbors); undirected inputs list both
directions. A batch travels as one contiguous compound buffer holding the
packed 1-bit adjacency and the packed quantized features.

Compound buffer layout (little-endian): magic ``QGTB``, u16 version, u32
num_subgraphs, u32 total_nodes, u8 feature_bits (0 when featureless), feature
quant params as f64 alpha_min, f64 alpha_max, u8 bits, u64 adjacency section
offset, u64 feature section offset (0 when absent), u32 boundaries
[num_subgraphs+1], u32 node_ids[total_nodes], then the bitpack-serialized
adjacency and feature sections at the recorded offsets.
"""

from __future__ import annotations

import random
import struct
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .bitpack import (
    ROW_WISE,
    BitPlaneStack,
    PackedBitMatrix,
    pack_colwise,
    pack_planes,
    serialize,
    deserialize,
)
from .bitgemm import popcount32
from .errors import FormatError
from .quantize import QuantParams, bit_decompose, quantize_matrix

GRAPH_MAGIC = b"QGTG"
BUFFER_MAGIC = b"QGTB"
_GRAPH_HEADER = struct.Struct("<4sHIQ")
_BUFFER_HEADER = struct.Struct("<4sHIIBddBQQ")

BALANCE_SLACK = 0.10


@dataclass(eq=False)
class Graph:
    """Directed edge set over ``num_nodes`` nodes, duplicates collapsed."""

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            e = np.unique(e, axis=0)
        self.edges = e
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.num_nodes:
                raise ValueError("feature row count must equal num_nodes")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(s), int(d)) for s, d in self.edges}

    def neighbors(self) -> list[list[int]]:
        """Undirected adjacency lists, sorted, no self references."""
        adj = [set() for _ in range(self.num_nodes)]
        for s, d in self.edges:
            if s != d:
                adj[s].add(int(d))
                adj[d].add(int(s))
        return [sorted(a) for a in adj]


def load_graph(path, fmt: str = "edge-list-text") -> Graph:
    """Read a graph. Text lines are ``src dst`` with an optional ``# nodes N``."""
    if fmt == "edge-list-text":
        return _load_text(path)
    if fmt == "binary":
        return _load_binary(path)
    raise ValueError(f"unknown graph format {fmt!r}")


def _load_text(path) -> Graph:
    declared = None
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "nodes" and parts[1].isdigit():
                    declared = int(parts[1])
                    continue
                raise FormatError(f"{path}:{lineno}: unrecognized header {line!r}")
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'src dst', got {line!r}")
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer endpoint") from None
            if s < 0 or d < 0:
                raise FormatError(f"{path}:{lineno}: negative node index")
            if declared is not None and (s >= declared or d >= declared):
                raise FormatError(
                    f"{path}:{lineno}: index exceeds declared node count {declared}"
                )
            pairs.append((s, d))
    if declared is None:
        declared = 1 + max((max(s, d) for s, d in pairs), default=-1)
    return Graph(num_nodes=declared, edges=np.array(pairs, dtype=np.int64).reshape(-1, 2))


def _load_binary(path) -> Graph:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _GRAPH_HEADER.size:
        raise FormatError("graph payload shorter than header")
    magic, version, n, m = _GRAPH_HEADER.unpack_from(data)
    if magic != GRAPH_MAGIC:
        raise FormatError(f"bad graph magic {magic!r}")
    if version != 1:
        raise FormatError(f"unsupported graph version {version}")
    expect = _GRAPH_HEADER.size + m * 8
    if len(data) != expect:
        raise FormatError(f"graph payload length {len(data)} != expected {expect}")
    edges = np.frombuffer(data, dtype="<u4", offset=_GRAPH_HEADER.size).astype(np.int64)
    return Graph(num_nodes=n, edges=edges.reshape(-1, 2))


def save_graph(g: Graph, path, fmt: str = "edge-list-text") -> None:
    if fmt == "edge-list-text":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# nodes {g.num_nodes}\n")
            for s, d in g.edges:
                fh.write(f"{s} {d}\n")
        return
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(_GRAPH_HEADER.pack(GRAPH_MAGIC, 1, g.num_nodes, g.num_edges))
            fh.write(g.edges.astype("<u4").tobytes())
        return
    raise ValueError(f"unknown graph format {fmt!r}")


@dataclass(eq=False)
class PartitionAssignment:
    """Node -> part index map; every node assigned, parts in [0, num_parts)."""

    num_parts: int
    part_of: np.ndarray
    edge_cut: int | None = None

    def __post_init__(self):
        self.part_of = np.asarray(self.part_of, dtype=np.int64)
        if self.part_of.size and (
            self.part_of.min() < 0 or self.part_of.max() >= self.num_parts
        ):
            raise ValueError("part index out of range")

    def members(self, part: int) -> np.ndarray:
        return np.nonzero(self.part_of == part)[0]


def edge_cut(g: Graph, assign: PartitionAssignment) -> int:
    """Number of distinct undirected edges whose endpoints land in different parts."""
    if not len(g.edges):
        return 0
    s, d = g.edges[:, 0], g.edges[:, 1]
    undirected = np.unique(
        np.stack([np.minimum(s, d), np.maximum(s, d)], axis=1), axis=0
    )
    crossing = assign.part_of[undirected[:, 0]] != assign.part_of[undirected[:, 1]]
    return int(crossing.sum())


def partition(g: Graph, num_parts: int, seed: int = 0) -> PartitionAssignment:
    """Balanced BFS-grown greedy partitioning (built-in METIS stand-in).

    Parts grow from low-degree seeds, preferring the frontier node with the
    most links into the growing part. Deterministic for a given seed; part
    sizes never exceed ceil(n / num_parts), well inside the 10% balance slack.
    """
    n = g.num_nodes
    if not 1 <= num_parts <= n:
        raise ValueError(f"num_parts must be in [1, {n}], got {num_parts}")
    adj = g.neighbors()
    degree = [len(a) for a in adj]
    rng = random.Random(seed)
    part_of = np.full(n, -1, dtype=np.int64)
    unassigned = set(range(n))

    for part in range(num_parts):
        remaining_parts = num_parts - part
        target = -(-len(unassigned) // remaining_parts)
        # Links into the growing part, for greedy frontier selection.
        gain: dict[int, int] = defaultdict(int)
        size = 0
        while size < target:
            if gain:
                node = max(gain, key=lambda v: (gain[v], -v))
            else:
                min_deg = min(degree[v] for v in unassigned)
                candidates = sorted(v for v in unassigned if degree[v] == min_deg)
                node = candidates[rng.randrange(len(candidates))]
            part_of[node] = part
            unassigned.discard(node)
            gain.pop(node, None)
            size += 1
            for nb in adj[node]:
                if part_of[nb] < 0:
                    gain[nb] += 1

    assign = PartitionAssignment(num_parts=num_parts, part_of=part_of)
    assign.edge_cut = edge_cut(g, assign)
    return assign


def import_partition(path, num_nodes: int | None = None,
                     num_parts: int | None = None) -> PartitionAssignment:
    """Read one part index per line (e.g. METIS output) and validate it."""
    parts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                parts.append(int(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not an integer") from None
    if num_nodes is not None and len(parts) != num_nodes:
        raise ValueError(f"expected {num_nodes} lines, found {len(parts)}")
    if not parts:
        raise ValueError("empty partition file")
    if min(parts) < 0:
        raise ValueError("negative part index")
    inferred = max(parts) + 1
    if num_parts is not None:
        if inferred > num_parts:
            raise ValueError(f"part index {inferred - 1} >= num_parts {num_parts}")
        inferred = num_parts
    return PartitionAssignment(num_parts=inferred, part_of=np.array(parts))


def export_partition(assign: PartitionAssignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in assign.part_of:
            fh.write(f"{p}\n")


@dataclass(eq=False)
class SubgraphBatch:
    """Block-diagonal binarized adjacency plus quantized features for some parts."""

    node_ids: np.ndarray
    adjacency: PackedBitMatrix
    features: BitPlaneStack | None
    boundaries: np.ndarray
    x_params: QuantParams | None = None

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.boundaries = np.asarray(self.boundaries, dtype=np.int64)
        total = len(self.node_ids)
        if self.boundaries[0] != 0 or self.boundaries[-1] != total:
            raise ValueError("boundaries must start at 0 and end at total nodes")
        if self.adjacency.logical_rows != total or self.adjacency.logical_cols != total:
            raise ValueError("adjacency must be square over the batch nodes")

    @property
    def total_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_subgraphs(self) -> int:
        return len(self.boundaries) - 1

    def degrees(self) -> np.ndarray:
        """Out-degree per batch row, from the packed adjacency (int64)."""
        counts = popcount32(self.adjacency.words2d).sum(axis=1, dtype=np.int64)
        return counts[: self.total_nodes]

    def __eq__(self, other):
        return (
            isinstance(other, SubgraphBatch)
            and np.array_equal(self.node_ids, other.node_ids)
            and np.array_equal(self.boundaries, other.boundaries)
            and self.adjacency == other.adjacency
            and self.features == other.features
            and self.x_params == other.x_params
        )


def build_batch(g: Graph, assign: PartitionAssignment, part_ids,
                x_quant: QuantParams | None = None, *,
                add_self_loops: bool = True) -> SubgraphBatch:
    """Assemble the induced block-diagonal batch for ``part_ids``.

    Cross-partition edges are dropped; each subgraph block keeps only its own
    edges (plus the diagonal when ``add_self_loops``). Adjacency packs
    column-wise with PAD8 rows and PAD128 columns; features quantize with
    ``x_quant`` and pack row-wise.
    """
    part_ids = list(part_ids)
    if len(part_ids) != len(set(part_ids)):
        raise ValueError("part_ids must be distinct")
    groups = [assign.members(p) for p in part_ids]
    node_ids = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
    total = len(node_ids)
    if total == 0:
        raise ValueError("empty batch")
    boundaries = np.cumsum([0] + [len(gr) for gr in groups])

    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[node_ids] = np.arange(total)
    block_of = np.full(g.num_nodes, -1, dtype=np.int64)
    for b, gr in enumerate(groups):
        block_of[gr] = b

    dense = np.zeros((total, total), dtype=np.uint8)
    if len(g.edges):
        s, d = g.edges[:, 0], g.edges[:, 1]
        keep = (block_of[s] >= 0) & (block_of[s] == block_of[d])
        dense[local[s[keep]], local[d[keep]]] = 1
    if add_self_loops:
        np.fill_diagonal(dense, 1)

    adjacency = pack_colwise(dense, pad_rows_to=8)

    features = None
    if g.features is not None:
        if x_quant is None:
            raise ValueError("x_quant is required to quantize node features")
        qm = quantize_matrix(g.features[node_ids], x_quant)
        features = pack_planes(bit_decompose(qm), ROW_WISE, pad_to=8)

    return SubgraphBatch(
        node_ids=node_ids,
        adjacency=adjacency,
        features=features,
        boundaries=boundaries,
        x_params=x_quant,
    )


@dataclass(eq=False)
class CompoundBuffer:
    """One contiguous byte image of a batch (format in module docstring)."""

    data: bytes

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def __eq__(self, other):
        return isinstance(other, CompoundBuffer) and self.data == other.data


def pack_batch(b: SubgraphBatch) -> CompoundBuffer:
    """Serialize a batch into a single transfer object."""
    adj_bytes = serialize(BitPlaneStack(bits=1, planes=[b.adjacency]))
    feat_bytes = serialize(b.features) if b.features is not None else b""
    ns, total = b.num_subgraphs, b.total_nodes
    fixed = _BUFFER_HEADER.size + 4 * (ns + 1) + 4 * total
    adj_off = fixed
    feat_off = adj_off + len(adj_bytes) if feat_bytes else 0
    if b.x_params is not None:
        amin, amax, bits = b.x_params.alpha_min, b.x_params.alpha_max, b.x_params.bits
    else:
        amin, amax, bits = 0.0, 0.0, 0
    fbits = b.features.bits if b.features is not None else 0
    header = _BUFFER_HEADER.pack(
        BUFFER_MAGIC, 1, ns, total, fbits, amin, amax, bits, adj_off, feat_off
    )
    body = (
        header
        + b.boundaries.astype("<u4").tobytes()
        + b.node_ids.astype("<u4").tobytes()
        + adj_bytes
        + feat_bytes
    )
    return CompoundBuffer(data=body)


def unpack_batch(buf: CompoundBuffer | bytes) -> SubgraphBatch:
    """Exact inverse of :func:`pack_batch`."""
    data = buf.data if isinstance(buf, CompoundBuffer) else bytes(buf)
    if len(data) < _BUFFER_HEADER.size:
        raise FormatError("compound buffer shorter than header")
    magic, version, ns, total, fbits, amin, amax, bits, adj_off, feat_off = \
        _BUFFER_HEADER.unpack_from(data)
    if magic != BUFFER_MAGIC:
        raise FormatError(f"bad compound-buffer magic {magic!r}")
    if version != 1:
        raise FormatError(f"unsupported compound-buffer version {version}")
    off = _BUFFER_HEADER.size
    need = off + 4 * (ns + 1) + 4 * total
    if len(data) < need or adj_off != need:
        raise FormatError("corrupt compound-buffer header")
    boundaries = np.frombuffer(data, dtype="<u4", count=ns + 1, offset=off)
    node_ids = np.frombuffer(data, dtype="<u4", count=total, offset=off + 4 * (ns + 1))
    adj_end = feat_off if feat_off else len(data)
    adj_stack = deserialize(data[adj_off:adj_end])
    if adj_stack.bits != 1:
        raise FormatError("adjacency section must be a 1-bit stack")
    features = deserialize(data[feat_off:]) if feat_off else None
    if features is not None and features.bits != fbits:
        raise FormatError("feature bit count disagrees with header")
    params = QuantParams(amin, amax, bits) if fbits else None
    return SubgraphBatch(
        node_ids=node_ids.astype(np.int64),
        adjacency=adj_stack.planes[0],
        features=features,
        boundaries=boundaries.astype(np.int64),
        x_params=params,
    )


def float32_dense_bytes(b: SubgraphBatch) -> int:
    """Size of the naive float32 dense encoding of the same batch."""
    n = b.total_nodes
    size = 4 * n * n
    if b.features is not None:
        size += 4 * n * b.features.logical_cols
    return size
