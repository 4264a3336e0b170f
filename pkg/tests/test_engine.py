import numpy as np
import pytest

from bitgnn import (
    CROSS_BIT,
    CROSS_TILE,
    BatchNormParams,
    Graph,
    LayerConfig,
    ModelConfig,
    QuantParams,
    build_batch,
    calibrate_model,
    gcn_model,
    gin_model,
    layer_forward,
    load_weights,
    model_forward,
    partition,
    quantize_matrix,
    reference_forward_f32,
    save_weights,
)
from oracles import emulate_model


def make_case(rng, n=48, dim=10, num_parts=3, bits_x=4, *, edge_factor=4,
              feat_range=(0.0, 1.0)):
    """Build a batch plus an independently constructed dense adjacency."""
    edges = rng.integers(0, n, (edge_factor * n, 2))
    feats = rng.uniform(*feat_range, (n, dim))
    g = Graph(num_nodes=n, edges=edges, features=feats)
    assign = partition(g, num_parts, seed=0)
    xp = QuantParams(feat_range[0], feat_range[1], bits_x)
    batch = build_batch(g, assign, list(range(num_parts)), xp)

    local = {int(v): i for i, v in enumerate(batch.node_ids)}
    dense = np.zeros((batch.total_nodes, batch.total_nodes), dtype=np.int64)
    for s, d in g.edge_set():
        if s in local and d in local:
            if assign.part_of[s] == assign.part_of[d]:
                dense[local[s], local[d]] = 1
    np.fill_diagonal(dense, 1)
    return batch, dense, feats[batch.node_ids], xp


class TestLayerForward:
    def test_identity_layer_requantization_is_idempotent(self):
        # A = I, W = identity on a grid that represents 1.0 exactly; the
        # aggregation requant at the input grid returns the input codes and
        # the logits are their dequantization.
        rng = np.random.default_rng(0)
        n, d, s, t = 9, 6, 3, 4
        g = Graph(num_nodes=n, edges=np.zeros((0, 2), dtype=np.int64),
                  features=rng.uniform(-1, 1, (n, d)))
        assign = partition(g, 1)
        xp = QuantParams(-1.0, 1.0, s)
        batch = build_batch(g, assign, [0], xp, add_self_loops=True)
        layer = LayerConfig(
            in_dim=d, out_dim=d, weight=np.eye(d),
            weight_params=QuantParams(0.0, 2.0, t),
            order="aggregate-then-update", output_mode="full-precision",
            mid_params=xp,
        )
        logits = layer_forward(batch, layer)
        codes = quantize_matrix(g.features[batch.node_ids], xp).values
        want = xp.alpha_min + xp.scale * codes.astype(np.float64)
        assert np.array_equal(logits, want)

    def test_zero_features_give_zero_logits_pre_bias(self):
        rng = np.random.default_rng(1)
        n, d = 20, 5
        g = Graph(num_nodes=n, edges=rng.integers(0, n, (60, 2)),
                  features=np.zeros((n, d)))
        assign = partition(g, 2, seed=0)
        xp = QuantParams(0.0, 1.0, 4)
        batch = build_batch(g, assign, [0, 1], xp)
        layer = LayerConfig(
            in_dim=d, out_dim=3, weight=rng.uniform(0, 1, (d, 3)),
            weight_params=QuantParams(0.0, 1.0, 4),
            order="aggregate-then-update", output_mode="full-precision",
            mid_params=QuantParams(0.0, 1.0, 4),
        )
        logits = layer_forward(batch, layer)
        assert not logits.any()

    def test_isolated_node_hand_chain(self):
        g = Graph(num_nodes=1, edges=np.zeros((0, 2), dtype=np.int64),
                  features=np.array([[0.5]]))
        assign = partition(g, 1)
        xp = QuantParams(0.0, 1.0, 2)
        batch = build_batch(g, assign, [0], add_self_loops=True, x_quant=xp)
        layer = LayerConfig(
            in_dim=1, out_dim=1, weight=np.array([[0.75]]),
            weight_params=QuantParams(0.0, 1.0, 2),
            bias=np.array([0.125]),
            order="aggregate-then-update", output_mode="full-precision",
            mid_params=QuantParams(0.0, 1.0, 2),
        )
        # code(0.5) = 2 on a 0.25 grid; A = [[1]] keeps it; requant keeps 2;
        # w code(0.75) = 3; U = 6; 0.0625 * 6 + 0.125 = 0.5 (all dyadic).
        logits = layer_forward(batch, layer)
        assert logits.shape == (1, 1)
        assert logits[0, 0] == 0.5

    def test_random_layer_matches_emulation_oracle(self):
        rng = np.random.default_rng(2)
        batch, dense, feats, xp = make_case(rng, bits_x=4)
        layer = LayerConfig(
            in_dim=10, out_dim=7, weight=rng.uniform(-0.5, 0.5, (10, 7)),
            weight_params=QuantParams(-0.5, 0.5, 4),
            bias=rng.uniform(-0.2, 0.2, 7), activation="none",
            order="aggregate-then-update", output_mode="full-precision",
            mid_params=QuantParams(0.0, 12.0, 4),
        )
        model = ModelConfig([layer], "cluster-gcn", 4, 4)
        got = layer_forward(batch, layer)
        want = emulate_model(dense, feats, model, xp)
        assert np.array_equal(got, want)

    def test_full_affine_dequant_into_logits_matches_oracle(self):
        # Non-dyadic grids with negative alpha_min exercise all three affine
        # cross terms on the path that feeds float logits directly, the most
        # rounding-sensitive point of the expression-mirroring contract.
        rng = np.random.default_rng(23)
        batch, dense, feats, xp = make_case(rng, bits_x=5,
                                            feat_range=(-0.9, 1.1))
        layer = LayerConfig(
            in_dim=10, out_dim=4, weight=rng.uniform(-0.45, 0.55, (10, 4)),
            weight_params=QuantParams(-0.45, 0.55, 5),
            order="aggregate-then-update", output_mode="full-precision",
            mid_params=QuantParams(-7.3, 9.1, 5),
        )
        model = ModelConfig([layer], "cluster-gcn", 5, 5)
        got = layer_forward(batch, layer)
        assert np.array_equal(got, emulate_model(dense, feats, model, xp))

    def test_uncalibrated_layer_rejected(self):
        rng = np.random.default_rng(3)
        batch, _, _, _ = make_case(rng)
        layer = LayerConfig(
            in_dim=10, out_dim=4, weight=rng.uniform(-1, 1, (10, 4)),
            weight_params=QuantParams(-1.0, 1.0, 4),
            output_mode="full-precision",
        )
        with pytest.raises(ValueError, match="mid_params"):
            layer_forward(batch, layer)


class TestModelForward:
    @pytest.mark.parametrize("builder,kind", [(gcn_model, "cluster-gcn"),
                                              (gin_model, "batched-gin")])
    def test_matches_emulation_oracle(self, builder, kind):
        rng = np.random.default_rng(4)
        batch, dense, feats, xp = make_case(rng, bits_x=3)
        model = builder(10, 5, hidden_dim=8, feature_bits=3, weight_bits=2, seed=9)
        calibrate_model(model, batch, feats)
        got = model_forward(batch, model)
        want = emulate_model(dense, feats, model, xp)
        assert model.kind == kind
        assert np.array_equal(got, want)

    def test_single_layer_model_reduces_to_layer_forward(self):
        rng = np.random.default_rng(5)
        batch, _, feats, _ = make_case(rng)
        model = gcn_model(10, 6, num_layers=1, feature_bits=4, weight_bits=4, seed=2)
        calibrate_model(model, batch, feats)
        assert np.array_equal(
            model_forward(batch, model), layer_forward(batch, model.layers[0])
        )

    def test_three_layer_preset_on_cliques(self):
        size = 6
        edges = [(b + i, b + j) for b in (0, size)
                 for i in range(size) for j in range(size) if i != j]
        rng = np.random.default_rng(6)
        g = Graph(num_nodes=2 * size, edges=np.array(edges),
                  features=rng.uniform(0, 1, (2 * size, 4)))
        assign = partition(g, 2, seed=0)
        xp = QuantParams(0.0, 1.0, 4)
        batch = build_batch(g, assign, [0, 1], xp)
        model = gcn_model(4, 3, feature_bits=4, weight_bits=4, seed=1)
        feats = g.features[batch.node_ids]
        calibrate_model(model, batch, feats)

        local = {int(v): i for i, v in enumerate(batch.node_ids)}
        dense = np.zeros((12, 12), dtype=np.int64)
        for s, d in g.edge_set():
            if assign.part_of[s] == assign.part_of[d]:
                dense[local[s], local[d]] = 1
        np.fill_diagonal(dense, 1)
        got = model_forward(batch, model)
        assert np.array_equal(got, emulate_model(dense, feats, model, xp))

    def test_optimization_invariance(self):
        rng = np.random.default_rng(7)
        batch, _, feats, _ = make_case(rng, n=64, num_parts=4)
        model = gcn_model(10, 4, feature_bits=4, weight_bits=3, seed=5)
        calibrate_model(model, batch, feats)
        base = model_forward(batch, model, jump=True, reuse=CROSS_TILE)
        for jump in (True, False):
            for reuse in (CROSS_BIT, CROSS_TILE):
                assert np.array_equal(
                    base, model_forward(batch, model, jump=jump, reuse=reuse)
                )

    def test_batch_norm_layer_matches_oracle(self):
        rng = np.random.default_rng(8)
        batch, dense, feats, xp = make_case(rng, bits_x=5)
        bn = BatchNormParams(mean=rng.uniform(-1, 1, 6),
                             var=rng.uniform(0.5, 2.0, 6),
                             gamma=rng.uniform(0.5, 1.5, 6),
                             beta=rng.uniform(-0.5, 0.5, 6))
        layers = [
            LayerConfig(in_dim=10, out_dim=6, weight=rng.uniform(-0.5, 0.5, (10, 6)),
                        weight_params=QuantParams(-0.5, 0.5, 3), bn=bn,
                        activation="relu", order="aggregate-then-update",
                        output_mode="bitplanes"),
            LayerConfig(in_dim=6, out_dim=3, weight=rng.uniform(-0.5, 0.5, (6, 3)),
                        weight_params=QuantParams(-0.5, 0.5, 3),
                        order="aggregate-then-update",
                        output_mode="full-precision"),
        ]
        model = ModelConfig(layers, "cluster-gcn", 5, 3)
        calibrate_model(model, batch, feats)
        got = model_forward(batch, model)
        assert np.array_equal(got, emulate_model(dense, feats, model, xp))

    def test_tanh_activation_matches_oracle(self):
        rng = np.random.default_rng(9)
        batch, dense, feats, xp = make_case(rng, bits_x=3)
        model = gcn_model(10, 4, hidden_dim=6, feature_bits=3, weight_bits=3, seed=3)
        for layer in model.layers[:-1]:
            layer.activation = "tanh"
        calibrate_model(model, batch, feats)
        got = model_forward(batch, model)
        assert np.array_equal(got, emulate_model(dense, feats, model, xp))

    def test_gin_order_is_update_first(self):
        model = gin_model(8, 3)
        assert all(ly.order == "update-then-aggregate" for ly in model.layers)
        model2 = gcn_model(8, 3)
        assert all(ly.order == "aggregate-then-update" for ly in model2.layers)

    def test_preset_shapes(self):
        gcn = gcn_model(29, 2)
        assert [ly.out_dim for ly in gcn.layers] == [16, 16, 2]
        gin = gin_model(50, 121)
        assert [ly.out_dim for ly in gin.layers] == [64, 64, 121]
        assert gcn.layers[-1].output_mode == "full-precision"

    def test_last_layer_must_be_full_precision(self):
        rng = np.random.default_rng(10)
        layer = LayerConfig(in_dim=4, out_dim=4, weight=rng.uniform(-1, 1, (4, 4)),
                            weight_params=QuantParams(-1, 1, 2),
                            output_mode="bitplanes")
        with pytest.raises(ValueError, match="full-precision"):
            ModelConfig([layer], "cluster-gcn", 2, 2)


class TestFloatReference:
    def test_zero_weight_model_zero_both_paths(self):
        rng = np.random.default_rng(11)
        batch, _, feats, _ = make_case(rng)
        layer = LayerConfig(
            in_dim=10, out_dim=4, weight=np.zeros((10, 4)),
            weight_params=QuantParams(0.0, 1.0, 4),
            order="aggregate-then-update", output_mode="full-precision",
            mid_params=QuantParams(0.0, 16.0, 4),
        )
        model = ModelConfig([layer], "cluster-gcn", 4, 4)
        assert not model_forward(batch, model).any()
        assert not reference_forward_f32(batch, feats, model).any()

    def test_identity_single_layer_returns_features(self):
        rng = np.random.default_rng(12)
        n, d = 10, 4
        g = Graph(num_nodes=n, edges=np.zeros((0, 2), dtype=np.int64),
                  features=rng.uniform(0, 1, (n, d)))
        assign = partition(g, 1)
        batch = build_batch(g, assign, [0], QuantParams(0, 1, 4))
        layer = LayerConfig(in_dim=d, out_dim=d, weight=np.eye(d),
                            weight_params=QuantParams(0.0, 2.0, 4),
                            order="aggregate-then-update",
                            output_mode="full-precision",
                            mid_params=QuantParams(0, 1, 4))
        model = ModelConfig([layer], "cluster-gcn", 4, 4)
        feats = g.features[batch.node_ids]
        ref = reference_forward_f32(batch, feats, model)
        assert np.array_equal(ref, feats.astype(np.float32))

    def test_error_bound_at_8_bits(self):
        rng = np.random.default_rng(13)
        batch, dense, feats, xp = make_case(rng, bits_x=8)
        model = gcn_model(10, 4, feature_bits=8, weight_bits=8, seed=4,
                          with_bias=False)
        calibrate_model(model, batch, feats)
        got = model_forward(batch, model)
        ref = reference_forward_f32(batch, feats, model).astype(np.float64)
        gap = np.abs(got - ref).max()

        # Interval-arithmetic bound propagated through the pipeline.
        deg_max = float(dense.sum(axis=1).max())
        err = xp.scale
        for layer in model.layers:
            err = deg_max * err
            err = err + layer.mid_params.scale
            mid_abs = max(abs(layer.mid_params.alpha_min),
                          abs(layer.mid_params.alpha_max))
            w_abs = float(np.abs(layer.weight).max())
            err = layer.in_dim * (mid_abs * layer.weight_params.scale + w_abs * err)
            if layer.output_mode == "bitplanes":
                err = err + layer.out_params.scale
        # small allowance for the float32 reference's own rounding
        bound = err + 1e-3 * (1.0 + np.abs(ref).max())
        assert gap <= bound

    def test_monotone_fidelity(self):
        def mean_dev(bits, seed):
            rng = np.random.default_rng(seed)
            batch, _, feats, _ = make_case(rng, n=40, dim=8, bits_x=bits)
            model = gcn_model(8, 4, feature_bits=bits, weight_bits=bits,
                              seed=seed)
            calibrate_model(model, batch, feats)
            logits = model_forward(batch, model)
            ref = reference_forward_f32(batch, feats, model)
            return float(np.abs(logits - ref).mean())

        trials = 20
        means = {b: np.mean([mean_dev(b, s) for s in range(trials)])
                 for b in (2, 4, 8)}
        assert means[8] <= means[4] <= means[2]


class TestWeightFile:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        batch, _, feats, _ = make_case(rng)
        src = gcn_model(10, 4, feature_bits=4, weight_bits=4, seed=21)
        path = tmp_path / "w.qgtw"
        save_weights(src, path)
        assert path.read_bytes()[:4] == b"QGTW"

        dst = gcn_model(10, 4, feature_bits=4, weight_bits=4, seed=99)
        load_weights(dst, path)
        for a, b in zip(src.layers, dst.layers):
            assert np.array_equal(a.weight.astype(np.float32),
                                  b.weight.astype(np.float32))
            assert a.weight_params == b.weight_params
        calibrate_model(src, batch, feats)
        calibrate_model(dst, batch, feats)
        assert np.allclose(model_forward(batch, src), model_forward(batch, dst))

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "w.qgtw"
        save_weights(gcn_model(10, 4, seed=0), path)
        from bitgnn import FormatError
        with pytest.raises(FormatError):
            load_weights(gcn_model(12, 4, seed=0), path)


class TestCalibration:
    def test_fills_all_grids(self):
        rng = np.random.default_rng(15)
        batch, _, feats, _ = make_case(rng)
        model = gin_model(10, 5, hidden_dim=6, feature_bits=4, weight_bits=4)
        assert model.layers[0].mid_params is None
        calibrate_model(model, batch, feats)
        for layer in model.layers:
            assert layer.mid_params is not None
            if layer.output_mode == "bitplanes":
                assert layer.out_params is not None
            assert layer.mid_params.bits == model.feature_bits
