"""Adaptive adjacency construction: spatial, temporal, and attention-fused.

Each traffic pattern owns an independent set of node embeddings, score
projections, and fusion weights. The temporal side is driven by learnable
time pools indexed by time-of-day and day-of-week, averaged over the
history window, so the graphs are per-window but constant across the
window's time steps.

All functions accept an optional leading batch dimension on the
window-dependent inputs and broadcast the parameter-only ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import GraphConfig
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class SpatialEmbeddings:
    """Two learnable node embeddings [N, Nd] feeding the spatial score."""

    e1: Tensor
    e2: Tensor


@dataclass
class TimeEmbeddingPools:
    """Per-node learnable embeddings for each time-of-day and day-of-week slot."""

    daily: Tensor   # [steps_per_day, N, D]
    weekly: Tensor  # [7, N, D]

    def lookup(self, tod_index: np.ndarray, dow_index: np.ndarray):
        """Gather pool slices for index arrays of shape [..., Th].

        Returns (daily, weekly) tensors of shape [..., Th, N, D].
        """
        return T.gather(self.daily, tod_index), T.gather(self.weekly, dow_index)


@dataclass
class AttentionFusionParams:
    """Per-head projections [N, d_h] and the output projection [s*d_h, N]."""

    query: list
    key: list
    value: list
    output: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.query)


@dataclass
class PatternGraphParams:
    """Everything one traffic pattern needs to build its adjacency set."""

    embeddings: SpatialEmbeddings
    spatial_w1: Tensor  # [Nd, Nd]
    spatial_w2: Tensor
    temporal_w1: Tensor  # [D, D]
    temporal_w2: Tensor
    fusion: AttentionFusionParams


@dataclass
class AdjacencySet:
    """The learned adjacency matrices of one pattern; `final` always exists.

    Matrices not built in the active graph mode stay None.
    """

    spatial: Tensor | None
    temporal: Tensor | None
    fused: Tensor | None
    final: Tensor


def _swap_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return T.transpose(t, axes)


def build_directed_graph(f1: Tensor, f2: Tensor, w1: Tensor, w2: Tensor,
                         alpha: float, k: int) -> Tensor:
    """Directed adjacency from two feature matrices [..., N, F].

    Projects both sides through saturated tanh, scores with the
    antisymmetric product m1 @ m2^T - m2 @ m1^T (so the diagonal is exactly
    zero and at most one direction of each pair survives the ReLU), then
    keeps the top k entries per row.
    """
    n = f1.shape[-2]
    if k > n:
        raise ConfigError(f"top-k retention k={k} exceeds node count {n}")
    m1 = T.tanh(T.mul(T.matmul(f1, w1), alpha))
    m2 = T.tanh(T.mul(T.matmul(f2, w2), alpha))
    score = T.sub(T.matmul(m1, _swap_last(m2)), T.matmul(m2, _swap_last(m1)))
    raw = T.relu(T.tanh(T.mul(score, alpha)))
    return T.top_k_rows(raw, k)


def temporal_feature_matrix(daily_lookup: Tensor, weekly_lookup: Tensor):
    """Average pool lookups [..., Th, N, D] over the window's time axis."""
    return daily_lookup.mean(axis=-3), weekly_lookup.mean(axis=-3)


def fuse_graphs(a_spatial: Tensor, a_temporal: Tensor, beta: float,
                params: AttentionFusionParams, return_scores: bool = False):
    """Blend spatial and temporal adjacencies through multi-head attention.

    Returns (fused, final): the saturated product matrix and the attention
    output after the terminal ReLU that keeps the adjacency non-negative.
    With return_scores, the per-head attention matrices come back too.
    """
    fused = T.relu(T.tanh(T.mul(T.matmul(a_spatial, a_temporal), beta)))
    head_outputs = []
    head_scores = []
    for wq, wk, wv in zip(params.query, params.key, params.value):
        q = T.matmul(a_spatial, wq)
        k = T.matmul(a_temporal, wk)
        v = T.matmul(fused, wv)
        scale = 1.0 / np.sqrt(wq.shape[-1])
        scores = T.softmax(T.mul(T.matmul(q, _swap_last(k)), scale), axis=-1)
        head_scores.append(scores)
        head_outputs.append(T.matmul(scores, v))
    stacked = head_outputs[0] if len(head_outputs) == 1 else T.concat(head_outputs, axis=-1)
    final = T.relu(T.matmul(stacked, params.output))
    if return_scores:
        return fused, final, head_scores
    return fused, final


def generate_pattern_graph(params: PatternGraphParams, time_features, cfg: GraphConfig,
                           mode: str, predefined: np.ndarray | None = None,
                           dtype=np.float64) -> AdjacencySet:
    """Build one pattern's AdjacencySet in the requested graph mode.

    `time_features` is the (daily, weekly) averaged feature pair from
    temporal_feature_matrix; it may carry a leading batch dimension.
    """
    if mode == "predefined":
        if predefined is None:
            raise ConfigError("graph mode 'predefined' needs a loaded road-network adjacency")
        return AdjacencySet(spatial=None, temporal=None, fused=None,
                            final=Tensor(np.asarray(predefined, dtype=dtype)))

    spatial = temporal = fused = None
    if mode in ("fused", "spatial_only"):
        e = params.embeddings
        spatial = build_directed_graph(e.e1, e.e2, params.spatial_w1, params.spatial_w2,
                                       cfg.alpha, cfg.k_spatial)
    if mode in ("fused", "temporal_only"):
        td_bar, tw_bar = time_features
        temporal = build_directed_graph(td_bar, tw_bar, params.temporal_w1, params.temporal_w2,
                                        cfg.alpha, cfg.k_temporal)
    if mode == "fused":
        fused, final = fuse_graphs(spatial, temporal, cfg.beta, params.fusion)
    elif mode == "spatial_only":
        final = spatial
    elif mode == "temporal_only":
        final = temporal
    else:
        raise ConfigError(f"unknown graph mode {mode!r}")
    return AdjacencySet(spatial=spatial, temporal=temporal, fused=fused, final=final)
