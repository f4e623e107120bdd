"""Positional encoding, attention aggregation, and message-flow schedules."""

import numpy as np
import pytest

from otmatch.errors import ConfigError, InvalidShape, IsolatedNode, ShapeMismatch
from otmatch.flow import (
    AttentionParams,
    FlowSchedule,
    GraphNodeState,
    ParameterStore,
    PositionalEncoder,
    attention_aggregate,
    cross_flow_step,
    fuse_position,
    grid_neighbors,
    inner_flow_step,
    load_parameter_store,
    positional_encode,
    residual_update,
    run_message_flow,
    save_parameter_store,
)
from otmatch.tensorio import FeatureGrid


def random_grid(rng, h, w, c):
    return FeatureGrid(rng.standard_normal((h, w, c)).astype(np.float32))


def random_state(rng, h, w, c):
    return GraphNodeState(rng.standard_normal((h * w, c)), h, w)


# ============================================================================
# Positional encoding
# ============================================================================


def test_encoding_at_origin():
    enc = positional_encode(4, 4, 8)
    assert np.allclose(enc[0, 0, 0::2], 0.0)  # all sin channels
    assert np.allclose(enc[0, 0, 1::2], 1.0)  # all cos channels


def test_encoding_range():
    enc = positional_encode(16, 16, 8)
    assert enc.min() >= -1.0 and enc.max() <= 1.0
    assert np.all(np.isfinite(enc))


def test_encoding_row_col_split():
    enc = positional_encode(5, 7, 8)
    # row half constant along columns, column half constant along rows
    assert np.allclose(enc[:, 0, :4], enc[:, 3, :4])
    assert np.allclose(enc[0, :, 4:], enc[2, :, 4:])
    assert np.allclose(enc[1, 0, 0], np.sin(1.0))
    assert np.allclose(enc[1, 0, 2], np.sin(1.0 / 10000.0 ** (4.0 / 8.0)))


def test_encoding_distinct_positions():
    enc = positional_encode(9, 9, 8).reshape(81, 8)
    diff = np.linalg.norm(enc[:, None, :] - enc[None, :, :], axis=2)
    diff[np.diag_indices(81)] = np.inf
    assert diff.min() > 0.0


def test_encoding_needs_multiple_of_four():
    with pytest.raises(InvalidShape):
        positional_encode(4, 4, 6)


def test_encoder_learned_map():
    enc = PositionalEncoder(8, linear_map=np.zeros((8, 8))).encode(3, 3)
    assert np.all(enc == 0.0)
    base = positional_encode(3, 3, 8)
    ident = PositionalEncoder(8, linear_map=np.eye(8)).encode(3, 3)
    assert np.allclose(ident, base)


# ============================================================================
# Fusion
# ============================================================================


def test_fuse_zero_encoding_is_identity():
    rng = np.random.default_rng(0)
    grid = random_grid(rng, 3, 3, 4)
    fused = fuse_position(grid, np.zeros((3, 3, 4)))
    assert np.array_equal(fused.values, grid.values)


def test_fuse_zero_features_gives_encoding():
    enc = positional_encode(3, 3, 8)
    zeros = FeatureGrid(np.zeros((3, 3, 8), dtype=np.float32))
    fused = fuse_position(zeros, enc)
    assert np.allclose(fused.values, enc.astype(np.float32), atol=1e-7)


def test_fuse_additivity():
    rng = np.random.default_rng(1)
    grid = random_grid(rng, 2, 2, 4)
    e1 = rng.standard_normal((2, 2, 4))
    e2 = rng.standard_normal((2, 2, 4))
    once = fuse_position(grid, e1 + e2)
    twice = fuse_position(fuse_position(grid, e1), e2)
    assert np.allclose(once.values, twice.values, atol=1e-6)


def test_fuse_shape_mismatch():
    grid = FeatureGrid(np.zeros((2, 2, 4), dtype=np.float32))
    with pytest.raises(ShapeMismatch):
        fuse_position(grid, np.zeros((2, 3, 4)))


# ============================================================================
# Attention aggregation
# ============================================================================


def identity_params(c):
    p = AttentionParams.zeros(c)
    p.wq = np.eye(c)
    p.wk = np.eye(c)
    p.wv = np.eye(c)
    return p


def test_single_source_passes_value_through():
    rng = np.random.default_rng(2)
    target = GraphNodeState(rng.standard_normal((1, 4)), 1, 1)
    source = GraphNodeState(rng.standard_normal((1, 4)), 1, 1)
    messages = attention_aggregate(target, source, [np.array([0])], identity_params(4))
    assert np.allclose(messages[0], source.features[0])


def test_equal_logits_split_evenly():
    params = identity_params(2)
    params.wq = np.zeros((2, 2))  # all logits zero
    target = GraphNodeState(np.array([[1.0, 0.0]]), 1, 1)
    sources = GraphNodeState(np.array([[2.0, 0.0], [0.0, 2.0]]), 1, 2)
    messages, weights = attention_aggregate(
        target, sources, [np.array([0, 1])], params, return_weights=True
    )
    assert np.allclose(weights[0], [0.5, 0.5])
    assert np.allclose(messages[0], [1.0, 1.0])


def test_closed_form_softmax_quarters():
    # logits (0, ln 3) with identity values v1=(1,0), v2=(0,1) -> m=(0.25, 0.75)
    params = identity_params(2)
    params.wk = np.array([[0.0, 0.0], [np.log(3.0), 0.0]])
    target = GraphNodeState(np.array([[1.0, 0.0]]), 1, 1)
    sources = GraphNodeState(np.array([[1.0, 0.0], [0.0, 1.0]]), 1, 2)
    messages = attention_aggregate(target, sources, [np.array([0, 1])], params)
    assert np.allclose(messages[0], [0.25, 0.75], atol=1e-12)


def test_isolated_target_rejected():
    state = GraphNodeState(np.zeros((2, 2)), 1, 2)
    with pytest.raises(IsolatedNode):
        attention_aggregate(state, state, [np.array([1]), np.array([], dtype=int)], identity_params(2))


def test_width_mismatch_rejected():
    a = GraphNodeState(np.zeros((1, 2)), 1, 1)
    b = GraphNodeState(np.zeros((1, 4)), 1, 1)
    with pytest.raises(ShapeMismatch):
        attention_aggregate(a, b, None, identity_params(2))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    params = AttentionParams.random(rng, 8)
    targets = random_state(rng, 4, 4, 8)
    sources = random_state(rng, 3, 5, 8)
    _, weights = attention_aggregate(targets, sources, None, params, return_weights=True)
    assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-6)
    edges = grid_neighbors(4, 4, 8)
    _, per_node = attention_aggregate(targets, targets, edges, params, return_weights=True)
    for alpha in per_node:
        assert abs(alpha.sum() - 1.0) <= 1e-6


# ============================================================================
# Residual update
# ============================================================================


def test_zero_mlp_is_identity():
    rng = np.random.default_rng(4)
    state = random_state(rng, 3, 3, 4)
    params = AttentionParams.zeros(4)
    params.wq, params.wk, params.wv = (rng.standard_normal((4, 4)) for _ in range(3))
    out = residual_update(state, rng.standard_normal((9, 4)), params)
    assert np.array_equal(out.features, state.features)


def test_zero_mlp2_is_identity_regardless_of_mlp1():
    rng = np.random.default_rng(5)
    state = random_state(rng, 2, 2, 4)
    params = AttentionParams.zeros(4)
    params.mlp1_w = rng.standard_normal((8, 4))
    params.mlp1_b = rng.standard_normal(4)
    out = residual_update(state, np.zeros((4, 4)), params)
    assert np.array_equal(out.features, state.features)


def test_residual_fuzz_outputs_finite():
    rng = np.random.default_rng(6)
    for _ in range(100):
        c = 4
        state = GraphNodeState(rng.uniform(-1, 1, (6, c)), 2, 3)
        params = AttentionParams(
            wq=rng.uniform(-1, 1, (c, c)), wk=rng.uniform(-1, 1, (c, c)),
            wv=rng.uniform(-1, 1, (c, c)), mlp1_w=rng.uniform(-1, 1, (2 * c, c)),
            mlp1_b=rng.uniform(-1, 1, c), mlp2_w=rng.uniform(-1, 1, (c, c)),
            mlp2_b=rng.uniform(-1, 1, c),
        )
        messages = attention_aggregate(state, state, None, params)
        out = residual_update(state, messages, params)
        assert np.all(np.isfinite(out.features))


# ============================================================================
# Inner and cross flow
# ============================================================================


def test_grid_neighbors_counts():
    edges4 = grid_neighbors(3, 3, 4)
    assert len(edges4[4]) == 4  # center
    assert len(edges4[0]) == 2  # corner
    edges8 = grid_neighbors(3, 3, 8)
    assert len(edges8[4]) == 8
    assert len(edges8[0]) == 3
    with pytest.raises(ConfigError):
        grid_neighbors(3, 3, 5)


def test_single_cell_grid_self_connects():
    rng = np.random.default_rng(7)
    state = random_state(rng, 1, 1, 4)
    params = AttentionParams.random(rng, 4)
    out = inner_flow_step(state, params)
    expected = residual_update(state, state.features @ params.wv, params)
    assert np.allclose(out.features, expected.features)


def test_constant_grid_stays_constant_on_torus():
    rng = np.random.default_rng(8)
    params = AttentionParams.random(rng, 4)
    constant = GraphNodeState(np.tile(rng.standard_normal(4), (16, 1)), 4, 4)
    out = inner_flow_step(constant, params, neighborhood=8, wrap=True)
    assert np.allclose(out.features, np.tile(out.features[0], (16, 1)), atol=1e-9)


def test_inner_flow_zero_params_identity():
    rng = np.random.default_rng(9)
    state = random_state(rng, 4, 5, 4)
    out = inner_flow_step(state, AttentionParams.zeros(4))
    assert np.array_equal(out.features, state.features)


def test_cross_flow_singleton_support():
    rng = np.random.default_rng(10)
    query = random_state(rng, 2, 2, 4)
    support = random_state(rng, 1, 1, 4)
    params = AttentionParams.random(rng, 4)
    q_out, _ = cross_flow_step(query, support, params)
    message = support.features[0] @ params.wv
    expected = residual_update(query, np.tile(message, (4, 1)), params)
    assert np.allclose(q_out.features, expected.features)


def test_cross_flow_zero_params_identity():
    rng = np.random.default_rng(11)
    query = random_state(rng, 2, 3, 4)
    support = random_state(rng, 3, 2, 4)
    q_out, s_out = cross_flow_step(query, support, AttentionParams.zeros(4))
    assert np.array_equal(q_out.features, query.features)
    assert np.array_equal(s_out.features, support.features)


def test_cross_flow_swap_symmetry():
    rng = np.random.default_rng(12)
    a = random_state(rng, 2, 2, 4)
    b = random_state(rng, 3, 3, 4)
    params = AttentionParams.random(rng, 4)
    a1, b1 = cross_flow_step(a, b, params)
    b2, a2 = cross_flow_step(b, a, params)
    assert np.array_equal(a1.features, a2.features)
    assert np.array_equal(b1.features, b2.features)


# ============================================================================
# Full schedule
# ============================================================================


def test_iterative_equals_stacked_at_one_step():
    rng = np.random.default_rng(13)
    query = random_grid(rng, 4, 4, 8)
    support = random_grid(rng, 4, 4, 8)
    block = AttentionParams.random(rng, 8)
    it_store = ParameterStore(8, FlowSchedule("iterative", 1), [block])
    st_store = ParameterStore(8, FlowSchedule("stacked", 1), [block])
    out_it = run_message_flow(query, support, FlowSchedule("iterative", 1), it_store)
    out_st = run_message_flow(query, support, FlowSchedule("stacked", 1), st_store)
    assert out_it[0].values.tobytes() == out_st[0].values.tobytes()
    assert out_it[1].values.tobytes() == out_st[1].values.tobytes()


def test_zero_steps_rejected():
    with pytest.raises(ConfigError):
        FlowSchedule("iterative", 0)


def test_parameter_count_mismatch_rejected():
    rng = np.random.default_rng(14)
    blocks = [AttentionParams.random(rng, 8) for _ in range(2)]
    with pytest.raises(ConfigError):
        ParameterStore(8, FlowSchedule("stacked", 3), blocks)
    store = ParameterStore(8, FlowSchedule("stacked", 2), blocks)
    grid = random_grid(rng, 2, 2, 8)
    with pytest.raises(ConfigError):
        run_message_flow(grid, grid, FlowSchedule("stacked", 3), store)


def test_all_zero_store_is_bit_identity():
    rng = np.random.default_rng(15)
    query = random_grid(rng, 4, 4, 8)
    support = random_grid(rng, 3, 5, 8)
    for steps in (1, 3, 5):
        for mode in ("iterative", "stacked"):
            schedule = FlowSchedule(mode, steps)
            store = ParameterStore.zeros(8, schedule)
            q_out, s_out = run_message_flow(query, support, schedule, store)
            assert q_out.values.tobytes() == query.values.tobytes()
            assert s_out.values.tobytes() == support.values.tobytes()


def test_zero_mlp_with_identity_posmap_gives_fused_input():
    rng = np.random.default_rng(16)
    query = random_grid(rng, 3, 3, 8)
    support = random_grid(rng, 3, 3, 8)
    schedule = FlowSchedule("iterative", 2)
    store = ParameterStore(8, schedule, [AttentionParams.zeros(8)], pos_map=None)
    q_out, s_out = run_message_flow(query, support, schedule, store)
    enc = PositionalEncoder(8).encode(3, 3)
    assert np.allclose(q_out.values, fuse_position(query, enc).values)
    assert np.allclose(s_out.values, fuse_position(support, enc).values)


def test_bounded_inputs_stay_finite_through_full_flow():
    rng = np.random.default_rng(18)
    query = FeatureGrid(rng.uniform(-10, 10, (6, 6, 8)).astype(np.float32))
    support = FeatureGrid(rng.uniform(-10, 10, (6, 6, 8)).astype(np.float32))
    schedule = FlowSchedule("iterative", 5)
    blocks = [AttentionParams(
        wq=rng.uniform(-10, 10, (8, 8)), wk=rng.uniform(-10, 10, (8, 8)),
        wv=rng.uniform(-10, 10, (8, 8)), mlp1_w=rng.uniform(-10, 10, (16, 8)),
        mlp1_b=rng.uniform(-10, 10, 8), mlp2_w=rng.uniform(-10, 10, (8, 8)),
        mlp2_b=rng.uniform(-10, 10, 8),
    )]
    store = ParameterStore(8, schedule, blocks)
    q_out, s_out = run_message_flow(query, support, schedule, store)
    assert np.all(np.isfinite(q_out.values))
    assert np.all(np.isfinite(s_out.values))


def test_flow_determinism():
    rng = np.random.default_rng(17)
    query = random_grid(rng, 4, 4, 8)
    support = random_grid(rng, 4, 4, 8)
    schedule = FlowSchedule("stacked", 3)
    store = ParameterStore.random(123, 8, schedule)
    first = run_message_flow(query, support, schedule, store)
    second = run_message_flow(query, support, schedule, store)
    assert first[0].values.tobytes() == second[0].values.tobytes()
    assert first[1].values.tobytes() == second[1].values.tobytes()


# ============================================================================
# Parameter store on disk
# ============================================================================


def test_store_round_trip_iterative(tmp_path):
    store = ParameterStore.random(7, 8, FlowSchedule("iterative", 4))
    save_parameter_store(store, tmp_path / "params")
    back = load_parameter_store(tmp_path / "params")
    assert back.schedule == store.schedule
    assert back.pos_map is None
    assert (tmp_path / "params" / "wq.cmt").exists()
    # float32 on disk
    assert np.allclose(back.blocks[0].wq, store.blocks[0].wq, atol=1e-6)


def test_store_round_trip_stacked_with_posmap(tmp_path):
    schedule = FlowSchedule("stacked", 2, neighborhood=4)
    store = ParameterStore.zeros(8, schedule)
    save_parameter_store(store, tmp_path / "params")
    assert (tmp_path / "params" / "block_0" / "mlp1_w.cmt").exists()
    assert (tmp_path / "params" / "block_1" / "mlp2_b.cmt").exists()
    back = load_parameter_store(tmp_path / "params")
    assert back.schedule.neighborhood == 4
    assert back.pos_map is not None and np.all(back.pos_map == 0.0)


def test_store_missing_tensor_rejected(tmp_path):
    store = ParameterStore.random(3, 8, FlowSchedule("iterative", 1))
    save_parameter_store(store, tmp_path / "params")
    (tmp_path / "params" / "wv.cmt").unlink()
    from otmatch.errors import IoError

    with pytest.raises(IoError):
        load_parameter_store(tmp_path / "params")
