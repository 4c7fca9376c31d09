import numpy as np
import pytest

import fusecast as fc
from fusecast.config import GraphConfig, ModelConfig, TrainConfig


def fd_gradient(f, x, h=1e-6):
    """Central finite differences of scalar callable f() around array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-8):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max())


def toy_model_config():
    return ModelConfig(history_steps=4, horizon_steps=2, patterns=2, rgc_iterations=2,
                       hidden=4, depth=2, node_embed_dim=3, time_embed_dim=3,
                       gate_hidden=6, head_hidden=6, head_channels=6, dropout=0.0)


def toy_graph_config(**kw):
    base = dict(k_spatial=2, k_temporal=2, heads=2, head_dim=2)
    base.update(kw)
    return GraphConfig(**base)


@pytest.fixture
def toy_series():
    series, params = fc.make_synthetic(4, 6, seed=7, coupling=0.5,
                                       steps_per_day=8, noise_std=1.0)
    return series, params


@pytest.fixture
def toy_setup(toy_series):
    """Series, splits, normalizer, and a float64 toy model."""
    series, _ = toy_series
    train_ws, val_ws, test_ws = fc.split_and_window(series, 4, 2, (0.6, 0.2, 0.2))
    norm = fc.fit_normalizer(train_ws)
    model = fc.Forecaster(series.n_nodes, series.steps_per_day, toy_model_config(),
                          toy_graph_config(), normalizer=norm, dtype=np.float64, seed=3)
    return series, train_ws, val_ws, test_ws, norm, model
