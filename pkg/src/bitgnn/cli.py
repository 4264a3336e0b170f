"""Benchmark harness: end-to-end runs, ablations, counters, CSV emission.

The timed region covers the model forward passes only (graph loading and
partitioning are timed separately and excluded); kernel phase times are means
over the configured rounds. Tile counters come from the first round, since
they are deterministic and identical across rounds. The CSV schema is
documented in the README.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .bitgemm import CROSS_BIT, CROSS_TILE
from .engine import (
    KernelTally,
    calibrate_model,
    gcn_model,
    gin_model,
    load_weights,
    model_forward,
    reference_forward_f32,
)
from .graph import (
    build_batch,
    float32_dense_bytes,
    import_partition,
    load_graph,
    pack_batch,
    partition,
)
from .quantize import QuantParams


@dataclass
class RunReport:
    """One benchmark run: configuration, timings, counters, fidelity."""

    dataset: str
    num_parts: int
    batch_size: int
    bits_x: int
    bits_w: int
    model: str
    layers: int
    hidden: int
    rounds: int
    seed: int
    jump: bool
    reuse: str
    self_loops: bool
    partition_s: float
    pack_s: float
    aggregate_s: float
    update_s: float
    epilogue_s: float
    tile_mma_count: int
    tile_fetch_count: int
    tiles_skipped: int
    tiles_total: int
    skip_ratio: float
    word_and_popcount_count: int
    agg_word_and_popcount_count: int
    compound_bytes: int
    float32_dense_bytes: int
    bytes_ratio: float
    mean_logit_dev: float
    max_logit_dev: float

    def __post_init__(self):
        if not 0.0 <= self.skip_ratio <= 1.0:
            raise ValueError("skip_ratio must lie in [0, 1]")


CSV_COLUMNS = [f.name for f in fields(RunReport)]


def emit_csv(reports, path) -> None:
    """Write reports as CSV: stable column order, header row, one row per run."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(asdict(r))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bitgnn-bench",
        description="Bit-serial quantized GNN inference benchmark",
    )
    p.add_argument("--graph", required=True, help="input graph path")
    p.add_argument("--format", choices=["edge-list-text", "binary"],
                   default="edge-list-text")
    p.add_argument("--num-parts", type=int, default=1500,
                   help="partition count (auto-scaled down for small graphs)")
    p.add_argument("--batch-size", type=int, default=8,
                   help="subgraph partitions per batch")
    p.add_argument("--model", choices=["gcn", "gin"], default="gcn")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--hidden", type=int, default=None,
                   help="hidden dim (default 16 for gcn, 64 for gin)")
    p.add_argument("--bits-x", type=int, default=4, help="feature bit width")
    p.add_argument("--bits-w", type=int, default=4, help="weight bit width")
    p.add_argument("--dim", type=int, default=32,
                   help="embedding dim when the graph has no features")
    p.add_argument("--classes", type=int, default=10, help="output classes")
    p.add_argument("--features", choices=["random", "ones"], default="random",
                   help="synthetic embedding generator")
    p.add_argument("--alpha-min-features", type=float, default=None)
    p.add_argument("--alpha-max-features", type=float, default=None)
    p.add_argument("--alpha-min-weights", type=float, default=-0.5)
    p.add_argument("--alpha-max-weights", type=float, default=0.5)
    p.add_argument("--alpha-min-act", type=float, default=None,
                   help="activation grid lower bound (default: calibrated)")
    p.add_argument("--alpha-max-act", type=float, default=None)
    p.add_argument("--no-jump", action="store_true",
                   help="disable zero-tile jumping")
    p.add_argument("--reuse", choices=[CROSS_BIT, CROSS_TILE], default=CROSS_TILE)
    p.add_argument("--rounds", type=int, default=200,
                   help="timed repetitions of the forward region")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--partition-file", default=None,
                   help="import an external (e.g. METIS) assignment")
    p.add_argument("--weights", default=None, help="QGTW weight file")
    p.add_argument("--csv", default=None, help="CSV output path")
    p.add_argument("--self-loops", choices=["on", "off"], default="on")
    return p


def _feature_grid(values: np.ndarray, lo, hi, bits: int) -> QuantParams:
    if lo is None:
        lo = float(values.min())
    if hi is None:
        hi = float(values.max())
        if hi <= lo:
            hi = lo + 1.0
    return QuantParams(lo, hi, bits)


def run(args) -> RunReport:
    """Execute one configured benchmark run and return its report."""
    g = load_graph(args.graph, args.format)
    if g.num_nodes == 0:
        raise ValueError(f"graph {args.graph} has no nodes")
    rng = np.random.default_rng(args.seed)
    if g.features is None:
        if args.features == "ones":
            g.features = np.ones((g.num_nodes, args.dim))
        else:
            g.features = rng.uniform(0.0, 1.0, size=(g.num_nodes, args.dim))
    dim = g.features.shape[1]
    x_params = _feature_grid(g.features, args.alpha_min_features,
                             args.alpha_max_features, args.bits_x)

    t0 = time.perf_counter()
    if args.partition_file:
        assign = import_partition(args.partition_file, num_nodes=g.num_nodes)
        num_parts = assign.num_parts
    else:
        num_parts = max(1, min(args.num_parts, g.num_nodes))
        assign = partition(g, num_parts, seed=args.seed)
    partition_s = time.perf_counter() - t0

    self_loops = args.self_loops == "on"
    t0 = time.perf_counter()
    batches = []
    compound_bytes = 0
    dense_bytes = 0
    for start in range(0, num_parts, args.batch_size):
        chunk = list(range(start, min(start + args.batch_size, num_parts)))
        if not any(len(assign.members(p)) for p in chunk):
            continue
        b = build_batch(g, assign, chunk, x_params, add_self_loops=self_loops)
        compound_bytes += pack_batch(b).nbytes
        dense_bytes += float32_dense_bytes(b)
        batches.append(b)
    pack_s = time.perf_counter() - t0
    if not batches:
        raise RuntimeError("no non-empty batches were produced")

    hidden = args.hidden if args.hidden is not None else (16 if args.model == "gcn" else 64)
    builder = gcn_model if args.model == "gcn" else gin_model
    model = builder(
        dim, args.classes, hidden_dim=hidden, num_layers=args.layers,
        feature_bits=args.bits_x, weight_bits=args.bits_w, seed=args.seed,
        weight_range=(args.alpha_min_weights, args.alpha_max_weights),
    )
    if args.weights:
        load_weights(model, args.weights)

    batch_features = [g.features[b.node_ids] for b in batches]
    if args.alpha_min_act is not None and args.alpha_max_act is not None:
        grid = QuantParams(args.alpha_min_act, args.alpha_max_act, args.bits_x)
        for layer in model.layers:
            layer.mid_params = grid
            if layer.output_mode == "bitplanes":
                layer.out_params = grid
    else:
        calibrate_model(model, batches[0], batch_features[0])

    jump = not args.no_jump
    clock: dict[str, float] = {}
    tally = KernelTally()
    logits = []
    for rnd in range(args.rounds):
        round_logits = []
        for b in batches:
            out = model_forward(b, model, jump=jump, reuse=args.reuse,
                                clock=clock, tally=tally if rnd == 0 else None)
            round_logits.append(out)
        if rnd == 0:
            logits = round_logits

    # Ablation guard: scheduling flags must never change the logits.
    other = CROSS_BIT if args.reuse == CROSS_TILE else CROSS_TILE
    check = model_forward(batches[0], model, jump=not jump, reuse=other)
    if not np.array_equal(check, logits[0]):
        raise RuntimeError("scheduling options changed the logits")

    abs_sum = 0.0
    abs_max = 0.0
    count = 0
    for b, feats, out in zip(batches, batch_features, logits):
        ref = reference_forward_f32(b, feats, model)
        d = np.abs(out - ref.astype(np.float64))
        abs_sum += float(d.sum())
        abs_max = max(abs_max, float(d.max()))
        count += d.size

    agg = tally.aggregation
    skip_ratio = agg.tiles_skipped / agg.tiles_total if agg.tiles_total else 0.0
    return RunReport(
        dataset=str(args.graph).rsplit("/", 1)[-1],
        num_parts=num_parts,
        batch_size=args.batch_size,
        bits_x=args.bits_x,
        bits_w=args.bits_w,
        model=args.model,
        layers=args.layers,
        hidden=hidden,
        rounds=args.rounds,
        seed=args.seed,
        jump=jump,
        reuse=args.reuse,
        self_loops=self_loops,
        partition_s=partition_s,
        pack_s=pack_s,
        aggregate_s=clock.get("aggregate", 0.0) / args.rounds,
        update_s=clock.get("update", 0.0) / args.rounds,
        epilogue_s=clock.get("epilogue", 0.0) / args.rounds,
        tile_mma_count=tally.total.tile_mma_count,
        tile_fetch_count=tally.total.tile_fetch_count,
        tiles_skipped=agg.tiles_skipped,
        tiles_total=agg.tiles_total,
        skip_ratio=skip_ratio,
        word_and_popcount_count=tally.total.word_and_popcount_count,
        agg_word_and_popcount_count=agg.word_and_popcount_count,
        compound_bytes=compound_bytes,
        float32_dense_bytes=dense_bytes,
        bytes_ratio=compound_bytes / dense_bytes if dense_bytes else 0.0,
        mean_logit_dev=abs_sum / count if count else 0.0,
        max_logit_dev=abs_max,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = run(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"dataset={report.dataset} model={report.model} "
          f"layers={report.layers} hidden={report.hidden} "
          f"bits_x={report.bits_x} bits_w={report.bits_w}")
    print(f"parts={report.num_parts} batch_size={report.batch_size} "
          f"rounds={report.rounds} jump={report.jump} reuse={report.reuse}")
    print(f"times[s] partition={report.partition_s:.4f} pack={report.pack_s:.4f} "
          f"aggregate={report.aggregate_s:.4f} update={report.update_s:.4f} "
          f"epilogue={report.epilogue_s:.4f}")
    print(f"tiles mma={report.tile_mma_count} fetch={report.tile_fetch_count}; "
          f"adjacency skipped={report.tiles_skipped}/{report.tiles_total} "
          f"skip_ratio={report.skip_ratio:.3f}")
    print(f"words and+popcount={report.word_and_popcount_count} "
          f"(aggregation {report.agg_word_and_popcount_count})")
    print(f"bytes compound={report.compound_bytes} "
          f"float32_dense={report.float32_dense_bytes} "
          f"ratio={report.bytes_ratio:.5f}")
    print(f"logit deviation vs float32: mean={report.mean_logit_dev:.6g} "
          f"max={report.max_logit_dev:.6g}")
    if args.csv:
        emit_csv([report], args.csv)
        print(f"csv written to {args.csv}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
