import numpy as np
import pytest

from asyncfuse.blocks import AttentionTrace
from asyncfuse.errors import ConfigError, ShapeError
from asyncfuse.model import (
    Forecaster,
    LinearBaseline,
    ModelConfig,
    auto_fusion_layers,
    forecast_loss,
    make_variant,
    metrics,
    placement_layers,
    resolve_schedule,
    wiring_plan,
)
from asyncfuse.numerics import Tensor, no_grad
from asyncfuse.numerics.gradcheck import check_gradients

from conftest import randomize

MICRO = ModelConfig(n_vars=2, lookback=16, patch_len=4, stride=4, horizon=4, d_model=8, n_queries=2,
                    n_heads=2, ffn_mult=2, depth=2, stages=1, d_llm=6)


def inputs(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, cfg.lookback, cfg.n_vars)) * 3 + 1
    e = rng.standard_normal((batch, cfg.d_llm, cfg.n_vars))
    return x, e


# -- schedule ------------------------------------------------------------------
def test_auto_schedule_examples():
    assert auto_fusion_layers(2, 1) == (1,)
    assert auto_fusion_layers(4, 2) == (2, 3)
    assert auto_fusion_layers(4, 1) == (3,)
    assert auto_fusion_layers(2, 2) == (1, 2)
    assert auto_fusion_layers(4, 4) == (1, 2, 3, 4)


def test_schedule_rejects_non_integral_interval():
    with pytest.raises(ConfigError):
        auto_fusion_layers(4, 3)


def test_schedule_rejects_bad_explicit_layers():
    with pytest.raises(ConfigError):
        resolve_schedule(MICRO.replace(depth=4, stages=2, fusion_layers=(3, 2)))
    with pytest.raises(ConfigError):
        resolve_schedule(MICRO.replace(depth=2, stages=1, fusion_layers=(3,)))
    with pytest.raises(ConfigError):
        Forecaster(MICRO.replace(depth=4, stages=3))


def test_placements_for_depth_four():
    # consecutive stages drawn from layers 1..3 (1..4 when four stages are needed)
    assert [placement_layers(4, 1, p) for p in ("shallow", "middle", "deep")] == [(1,), (2,), (3,)]
    assert [placement_layers(4, 2, p) for p in ("shallow", "middle", "deep")] == [(1, 2), (2, 3), (2, 3)]
    assert {placement_layers(4, 4, p) for p in ("shallow", "middle", "deep")} == {(1, 2, 3, 4)}


def test_default_refine_set_follows_first_memory():
    assert resolve_schedule(MICRO.replace(depth=4, stages=2)) == ((2, 3), (3, 4))


# -- wiring --------------------------------------------------------------------
HAND_TRACE = [
    ("unimodal", "time", 1), ("unimodal", "text", 1),
    ("unimodal", "time", 2), ("unimodal", "text", 2),
    ("fusion", "trunk", 2, 1),
    ("refine", "time", 3), ("refine", "text", 3),
    ("fusion", "trunk", 3, 2),
    ("refine", "time", 4), ("refine", "text", 4),
    ("head", "time", 4),
]


def test_wiring_matches_hand_trace():
    cfg = MICRO.replace(depth=4, stages=2, fusion_layers=(2, 3), refine_layers=(2, 3, 4))
    assert wiring_plan(cfg) == HAND_TRACE
    trace = AttentionTrace()
    x, e = inputs(cfg)
    with no_grad():
        Forecaster(cfg)(x, e, trace)
    assert trace.wiring == HAND_TRACE


def test_two_layer_one_stage_trace():
    trace = AttentionTrace()
    with no_grad():
        Forecaster(MICRO)(*inputs(MICRO), trace)
    assert trace.wiring == [("unimodal", "time", 1), ("unimodal", "text", 1), ("fusion", "trunk", 1, 1),
                            ("refine", "time", 2), ("refine", "text", 2), ("head", "time", 2)]


@pytest.mark.parametrize("n_layers,s", [(2, 1), (2, 2), (4, 1), (4, 2)])
def test_fusion_count_is_stage_count(n_layers, s):
    full = MICRO.replace(depth=n_layers, stages=s)
    sync = full.replace(variant="sync_refine")
    for cfg, expected in ((full, s), (sync, n_layers)):
        trace = AttentionTrace()
        with no_grad():
            Forecaster(cfg)(*inputs(cfg), trace)
        assert trace.fusion_calls() == expected == make_variant(cfg)["fusion_calls"]


# -- variants ------------------------------------------------------------------
@pytest.mark.parametrize("variant", ["full", "no_trunk", "no_query", "no_gate", "sync_refine", "trunk_decoder"])
def test_variant_output_shape(variant):
    cfg = MICRO.replace(variant=variant, horizon=5)
    with no_grad():
        y = Forecaster(cfg)(*inputs(cfg))
    assert y.shape == (2, 5, 2)


def test_output_shape_full_size_config():
    cfg = ModelConfig(n_vars=7, horizon=96, d_model=16, d_llm=32)
    x = np.random.default_rng(0).standard_normal((2, 96, 7))
    with no_grad():
        assert Forecaster(cfg)(x, np.zeros((2, 32, 7))).shape == (2, 96, 7)


def test_no_trunk_has_no_fusion_parameters():
    names = [n for n, _ in Forecaster(MICRO.replace(variant="no_trunk")).named_parameters()]
    assert not any(n.startswith(("fusion", "queries", "refine", "adapter")) for n in names)
    assert make_variant(MICRO.replace(variant="no_trunk"))["fusion_calls"] == 0


def test_no_gate_uses_fixed_unit_gate():
    m = Forecaster(MICRO.replace(variant="no_gate"))
    assert m.adapter.scale() == 1.0
    assert "adapter.gate" not in dict(m.named_parameters())


def test_no_query_memory_spans_patches():
    cfg = MICRO.replace(variant="no_query")
    trace = AttentionTrace()
    with no_grad():
        Forecaster(cfg)(*inputs(cfg), trace)
    assert trace.features["stage1_memory"].shape == (2 * 2, cfg.patch.num_patches, 8)


def test_unknown_variant():
    with pytest.raises(ConfigError):
        MICRO.replace(variant="bogus")


def test_input_shape_checked():
    with pytest.raises(ShapeError):
        Forecaster(MICRO)(np.zeros((1, 15, 2)), np.zeros((1, 6, 2)))


# -- equivalences --------------------------------------------------------------
def test_gate_off_matches_no_trunk():
    full = randomize(Forecaster(MICRO.replace(depth=4, stages=2)), np.random.default_rng(1))
    full.adapter.gate.data[:] = -30.0
    plain = Forecaster(MICRO.replace(depth=4, stages=2, variant="no_trunk"))
    plain.load_state_dict(full.state_dict(), strict=False)
    x, e = inputs(MICRO, batch=3, seed=5)
    with no_grad():
        np.testing.assert_allclose(full(x, e).data, plain(x, e).data, atol=1e-7, rtol=0)


def test_revin_consistency_exact_normalised_targets():
    m = LinearBaseline(MICRO)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 16, 2)) * 5 + 10
    y = rng.standard_normal((2, 4, 2)) * 5 + 10
    mean, std = x.mean(1, keepdims=True), x.std(1, keepdims=True)
    # a model whose normalised output equals the normalised target reproduces y
    m.proj.weight.data[:] = 0
    state = m.revin.new_state()
    from asyncfuse.preprocess import revin_normalize
    revin_normalize(Tensor(x), state)
    out = revin_normalize(Tensor((y - mean) / std), state, "denorm")
    np.testing.assert_allclose(out.data, y, atol=1e-6)


# -- gradients -----------------------------------------------------------------
def test_end_to_end_gradients_micro():
    cfg = MICRO  # width 8, 2 heads, depth 2, 1 stage, 2 queries, 4 patches, horizon 4, 2 vars
    assert cfg.patch.num_patches == 4
    model = randomize(Forecaster(cfg), np.random.default_rng(7), scale=0.3)
    x, e = inputs(cfg)
    y = np.random.default_rng(8).standard_normal((2, 4, 2))
    errs = check_gradients(lambda: forecast_loss(model(x, e), y), model.named_parameters())
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])


# -- loss and metrics ----------------------------------------------------------
def test_loss_examples():
    y = Tensor(np.array([[1.0, 2.0]]))
    assert forecast_loss(y, y).item() == 0.0
    assert forecast_loss(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]])).item() == 5.0
    params = [Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)]
    assert forecast_loss(y, y, params, decay=1.0).item() == 5.0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        forecast_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 3)))


def test_metrics_examples():
    assert metrics(np.array([2.0, 4.0]), np.array([1.0, 2.0])) == (2.5, 1.5)
    assert metrics(np.ones(3), np.ones(3)) == (0.0, 0.0)
    mse, mae = metrics(np.full((2, 3), 0.7), np.zeros((2, 3)))
    assert mse == pytest.approx(0.49, abs=1e-15) and mae == pytest.approx(0.7, abs=1e-15)


def test_forward_deterministic_for_seed():
    x, e = inputs(MICRO)
    with no_grad():
        a = Forecaster(MICRO)(x, e).data
        b = Forecaster(MICRO)(x, e).data
    assert a.tobytes() == b.tobytes()
