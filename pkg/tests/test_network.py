import numpy as np
import pytest

import fusecast as fc
from conftest import fd_gradient, rel_err, toy_graph_config, toy_model_config
from fusecast import tensor as T
from fusecast.errors import ConfigError, ShapeError
from fusecast.network import (Forecaster, GruParams, RgcParams, gru_forward,
                              normalized_propagation, parameter_count, rgc_forward)
from fusecast.tensor import Tape, Tensor


def test_propagation_rows_sum_to_one_exactly():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = Tensor(rng.uniform(0, 2, (6, 6)))
        prop = normalized_propagation(a)
        assert np.abs(prop.data.sum(axis=-1) - 1.0).max() <= 1e-12


def test_rgc_gamma_one_replicates_input():
    rng = np.random.default_rng(1)
    h = Tensor(rng.standard_normal((3, 4, 2)))
    a = Tensor(rng.uniform(0, 1, (4, 4)))
    w = Tensor(rng.standard_normal((3 * 2, 5)))
    out = rgc_forward(h, a, RgcParams(gamma=1.0, depth=3, weight=w))
    expected = np.concatenate([h.data] * 3, axis=-1) @ w.data
    assert np.array_equal(out.data, expected)


def test_rgc_zero_adjacency_propagates_identity():
    rng = np.random.default_rng(2)
    h = Tensor(rng.standard_normal((2, 3, 2)))
    a = Tensor(np.zeros((3, 3)))
    w = Tensor(rng.standard_normal((2 * 2, 2)))
    out = rgc_forward(h, a, RgcParams(gamma=0.3, depth=2, weight=w))
    # self-loops only: every level equals the input regardless of gamma
    expected = np.concatenate([h.data, h.data], axis=-1) @ w.data
    assert np.allclose(out.data, expected, atol=1e-14)


def test_rgc_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    h = Tensor(rng.standard_normal((2, 4, 3)))
    a = Tensor(rng.uniform(0.1, 1, (4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
    params = RgcParams(gamma=0.2, depth=2, weight=w)
    mix = rng.standard_normal((2, 4, 2))

    def scalar():
        return (rgc_forward(h, a, params) * mix).sum()

    with Tape() as tape:
        tape.backward(scalar())
    for t in (a, w):
        fd = fd_gradient(lambda: scalar().item(), t.data)
        assert rel_err(t.grad, fd, floor=1e-6) < 1e-5


def test_channel_lift_matches_linear_map():
    x = Tensor(np.full((1, 1, 1), 3.0))
    w = Tensor(np.ones((1, 2)))
    assert (x @ w).data.tolist() == [[[3.0, 3.0]]]
    assert np.array_equal((x @ Tensor(np.zeros((1, 2)))).data, np.zeros((1, 1, 2)))


def _zero_gru(d_in, d_h):
    z = lambda shape: Tensor(np.zeros(shape))
    return GruParams(wz=z((d_in, d_h)), wr=z((d_in, d_h)), wh=z((d_in, d_h)),
                     uz=z((d_h, d_h)), ur=z((d_h, d_h)), uh=z((d_h, d_h)),
                     bz=z((d_h,)), br=z((d_h,)), bh=z((d_h,)))


def test_gru_zero_weights_zero_input_stays_zero():
    out = gru_forward(Tensor(np.zeros((4, 3, 2))), _zero_gru(2, 2), 0.0, False)
    assert np.array_equal(out.data, np.zeros((4, 3, 2)))


def test_gru_single_step_shape():
    rng = np.random.default_rng(4)
    params = _zero_gru(3, 2)
    out = gru_forward(Tensor(rng.standard_normal((1, 5, 3))), params, 0.0, False)
    assert out.shape == (1, 5, 2)


def test_gru_hidden_stays_inside_unit_ball():
    # h_t is a convex mix of h_{t-1} and tanh output, so |h| < 1 from h_0 = 0
    rng = np.random.default_rng(5)
    d_in, d_h = 3, 4
    u = lambda shape: Tensor(rng.standard_normal(shape) * 2.0)
    params = GruParams(wz=u((d_in, d_h)), wr=u((d_in, d_h)), wh=u((d_in, d_h)),
                       uz=u((d_h, d_h)), ur=u((d_h, d_h)), uh=u((d_h, d_h)),
                       bz=u((d_h,)), br=u((d_h,)), bh=u((d_h,)))
    x = Tensor(rng.standard_normal((2, 20, 5, d_in)) * 3.0)
    out = gru_forward(x, params, 0.0, False)
    assert np.abs(out.data).max() < 1.0


def _toy_model(toy_setup, **overrides):
    series, train_ws, val_ws, test_ws, norm, model = toy_setup
    return series, train_ws, model


def test_forward_shapes_and_activations(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    hist, targ, tod, dow = train_ws.batch([0, 1, 2])
    pred, acts = model.forward_batch(hist, tod, dow, collect=True)
    cfg = model.cfg
    gmd = cfg.patterns * cfg.rgc_iterations * cfg.hidden
    md = cfg.rgc_iterations * cfg.hidden
    assert pred.shape == (3, cfg.horizon_steps, 4, 1)
    assert acts.x_out.shape == (3, cfg.history_steps, 4, gmd)
    assert acts.h_out.shape == (3, cfg.history_steps, 4, md)
    assert len(acts.graphs) == cfg.patterns
    assert len(acts.flows.flows) == cfg.patterns


def test_forward_window_matches_contract_shapes(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    acts = model.forward_window(train_ws.window(0))
    cfg = model.cfg
    assert acts.prediction.shape == (cfg.horizon_steps, 4, 1)
    assert acts.x_out.shape == (cfg.history_steps, 4,
                                cfg.patterns * cfg.rgc_iterations * cfg.hidden)
    assert acts.h_out.shape == (cfg.history_steps, 4, cfg.rgc_iterations * cfg.hidden)


def test_eval_forward_is_deterministic(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    hist, _, tod, dow = train_ws.batch([0, 1])
    a = model.forward_batch(hist, tod, dow, training=False)
    b = model.forward_batch(hist, tod, dow, training=False)
    assert a.data.tobytes() == b.data.tobytes()


def test_prediction_responds_to_input(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    hist, _, tod, dow = train_ws.batch([0])
    base = model.forward_batch(hist, tod, dow).data
    bumped = hist.copy()
    bumped[0, 0, 0, 0] += 5.0
    assert not np.allclose(model.forward_batch(bumped, tod, dow).data, base)


def test_zero_head_weights_give_zero_prediction(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    model.normalizer = None  # look at the raw regression output
    for name in ("head.w1", "head.b1", "head.w2", "head.b2",
                 "head.out.weight", "head.out.bias"):
        p = model.parameters()[name]
        p.data = np.zeros_like(p.data)
    hist, _, tod, dow = train_ws.batch([0, 1])
    pred = model.forward_batch(hist, tod, dow)
    assert np.array_equal(pred.data, np.zeros_like(pred.data))


def test_output_shape_at_pems08_scale():
    cfg = toy_model_config()
    cfg.history_steps = 12
    cfg.horizon_steps = 12
    gcfg = toy_graph_config(k_spatial=10, k_temporal=10, heads=4, head_dim=8)
    model = Forecaster(170, 288, cfg, gcfg, dtype=np.float32, seed=0)
    rng = np.random.default_rng(0)
    hist = rng.uniform(0, 100, (1, 12, 170, 1))
    tod = np.arange(12)[None, :]
    dow = np.zeros((1, 12), dtype=int)
    pred = model.forward_batch(hist, tod, dow)
    assert pred.shape == (1, 12, 170, 1)


def test_parameter_count_matches_closed_form(toy_setup):
    series, _, model = _toy_model(toy_setup)
    assert model.n_parameters == parameter_count(model.cfg, model.graph_cfg, 4, 8)


def test_parameter_count_formula_across_configs():
    for patterns, m_iter, depth in ((1, 1, 1), (3, 2, 2), (2, 3, 4)):
        cfg = toy_model_config()
        cfg.patterns, cfg.rgc_iterations, cfg.depth = patterns, m_iter, depth
        gcfg = toy_graph_config()
        model = Forecaster(5, 6, cfg, gcfg, seed=1)
        assert model.n_parameters == parameter_count(cfg, gcfg, 5, 6)


def test_pattern_blocks_swap_with_pattern_parameters(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    # neutral gates (0.5/0.5 split) make the two pattern inputs identical
    for g in range(model.cfg.patterns - 1):
        for name in (f"decouple.{g}.w1", f"decouple.{g}.w2"):
            p = model.parameters()[name]
            p.data = np.zeros_like(p.data)
    hist, _, tod, dow = train_ws.batch([0])
    _, acts = model.forward_batch(hist, tod, dow, collect=True)
    before = acts.x_out.data.copy()

    params = model.parameters()
    prefix0, prefix1 = "pattern0.", "pattern1."
    for name in [n for n in params if n.startswith(prefix0)]:
        other = prefix1 + name[len(prefix0):]
        params[name].data, params[other].data = params[other].data, params[name].data
    _, acts2 = model.forward_batch(hist, tod, dow, collect=True)
    after = acts2.x_out.data
    half = before.shape[-1] // 2
    assert np.array_equal(after[..., :half], before[..., half:])
    assert np.array_equal(after[..., half:], before[..., :half])


def test_single_pattern_single_block_collapses_to_one_rgc(toy_setup):
    series, train_ws, _ = _toy_model(toy_setup)
    cfg = toy_model_config()
    cfg.patterns = 1
    cfg.rgc_iterations = 1
    model = Forecaster(series.n_nodes, series.steps_per_day, cfg, toy_graph_config(),
                       dtype=np.float64, seed=3)
    hist, _, tod, dow = train_ws.batch([0])
    _, acts = model.forward_batch(hist, tod, dow, collect=True)
    # X_out must equal one RGC pass over the projected input
    w, b = model.projections[0]
    xn = Tensor(np.asarray(hist, dtype=np.float64))
    projected = xn @ w + b
    expected = rgc_forward(projected, acts.graphs[0].final, model.rgc_stacks[0][0])
    assert np.array_equal(acts.x_out.data, expected.data)


def test_load_state_validates_names_and_shapes(toy_setup):
    series, _, model = _toy_model(toy_setup)
    state = model.state()
    state.pop("gru.bz")
    with pytest.raises(ShapeError, match="gru.bz"):
        model.load_state(state)
    state = model.state()
    state["gru.bz"] = np.zeros(99)
    with pytest.raises(ShapeError, match="gru.bz"):
        model.load_state(state)


def test_state_roundtrip_preserves_predictions(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    hist, _, tod, dow = train_ws.batch([0])
    before = model.forward_batch(hist, tod, dow).data.copy()
    state = model.state()
    fresh = Forecaster(series.n_nodes, series.steps_per_day, model.cfg, model.graph_cfg,
                       normalizer=model.normalizer, dtype=np.float64, seed=999)
    fresh.load_state(state)
    assert np.array_equal(fresh.forward_batch(hist, tod, dow).data, before)


def test_head_dim_invariant_enforced():
    cfg = toy_model_config()
    with pytest.raises(ConfigError, match="head_dim"):
        Forecaster(4, 8, cfg, toy_graph_config(heads=4, head_dim=8), seed=0)


def test_mismatched_history_shape_rejected(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    hist, _, tod, dow = train_ws.batch([0])
    with pytest.raises(ShapeError, match=r"\[normalize\]"):
        model.forward_batch(hist[:, :2], tod, dow)


def test_stage_tag_on_lookup_failure(toy_setup):
    series, train_ws, model = _toy_model(toy_setup)
    hist, _, tod, dow = train_ws.batch([0])
    with pytest.raises(IndexError, match=r"\[time-lookups\]"):
        model.forward_batch(hist, tod + 1000, dow)
