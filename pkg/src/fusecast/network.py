"""Full forecasting network: decoupled pattern streams, per-pattern fused
graphs, residual graph convolution stacks, a GRU over time, and a
skip-connection regression head.

Forward passes accept a leading batch dimension on histories and calendar
indices; graphs that depend on the window's time indices come out batched
as well. Parameters are held in a flat ordered mapping whose names are the
checkpoint contract:

    time_pool.{daily|weekly}
    pattern{g}.spatial_emb.{e1|e2}
    pattern{g}.fusion.{spatial|temporal}.{w1|w2}
    pattern{g}.fusion.attn.head{h}.{wq|wk|wv}, pattern{g}.fusion.attn.wo
    pattern{g}.project.{weight|bias}
    pattern{g}.rgc{m}.weight
    decouple.{g}.{w1|w2}
    gru.{wz|wr|wh|uz|ur|uh|bz|br|bh}
    head.{w1|b1|w2|b2}, head.out.{weight|bias}
"""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import GraphConfig, ModelConfig
from .data import DAYS_PER_WEEK, Normalizer
from .decouple import GateParams, PatternFlows, decouple
from .errors import ShapeError
from .graphgen import (AdjacencySet, AttentionFusionParams, PatternGraphParams,
                       SpatialEmbeddings, TimeEmbeddingPools, generate_pattern_graph,
                       temporal_feature_matrix)
from .tensor import Tensor


@dataclass
class RgcParams:
    """One residual propagation stack: retention ratio, depth, mixing weights."""

    gamma: float
    depth: int
    weight: Tensor  # [depth * d_in, d_out]


@dataclass
class GruParams:
    wz: Tensor
    wr: Tensor
    wh: Tensor
    uz: Tensor
    ur: Tensor
    uh: Tensor
    bz: Tensor
    br: Tensor
    bh: Tensor


@dataclass
class ForwardActivations:
    """Intermediate tensors of one forward pass, retained for inspection."""

    graphs: list            # per-pattern AdjacencySet
    flows: PatternFlows
    x_out: Tensor           # [..., Th, N, G*M*d]
    h_out: Tensor           # [..., Th, N, M*d]
    h_skip: Tensor          # [..., Th, N, skip width]
    prediction: Tensor      # [..., Tf, N, C], raw flow units


@contextmanager
def _stage(name: str):
    """Prefix errors escaping a forward stage with the stage name."""
    try:
        yield
    except Exception as exc:
        if exc.args and isinstance(exc.args[0], str):
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        else:
            exc.args = (f"[{name}]",) + exc.args
        raise


def normalized_propagation(adjacency: Tensor) -> Tensor:
    """Self-looped, degree-normalized operator: rows sum to one exactly.

    The added identity guarantees every row degree is at least 1, so the
    division is always well defined on non-negative adjacencies.
    """
    n = adjacency.shape[-1]
    a_tilde = T.add(adjacency, Tensor(np.eye(n, dtype=adjacency.dtype)))
    degree = a_tilde.sum(axis=-1, keepdims=True)
    return T.div(a_tilde, degree)


def rgc_forward(h_in: Tensor, adjacency: Tensor, params: RgcParams) -> Tensor:
    """Residual graph convolution over [..., Th, N, d] node features.

    Adds self-loops, row-normalizes by degree, then alternates between
    retaining gamma of the input and propagating the rest, concatenating
    every depth level before the mixing weights.
    """
    prop = normalized_propagation(adjacency)
    while prop.ndim >= 3 and prop.ndim < h_in.ndim:
        prop = T.reshape(prop, prop.shape[:-2] + (1,) + prop.shape[-2:])
    levels = [h_in]
    h = h_in
    for _ in range(params.depth - 1):
        h = T.add(T.mul(h_in, params.gamma), T.mul(T.matmul(prop, h), 1.0 - params.gamma))
        levels.append(h)
    stacked = levels[0] if params.depth == 1 else T.concat(levels, axis=-1)
    return T.matmul(stacked, params.weight)


def gru_forward(x_seq: Tensor, params: GruParams, dropout_rate: float,
                training: bool, rng=None) -> Tensor:
    """Shared-weight GRU over the time axis of [..., Th, N, d_in].

    Nodes ride along as batch elements; the hidden state starts at zero
    and the stacked outputs pass through inverted dropout.
    """
    th = x_seq.shape[-3]
    n = x_seq.shape[-2]
    d_h = params.uz.shape[0]
    h = Tensor(np.zeros((1, n, d_h), dtype=x_seq.dtype))
    outputs = []
    for x_t in T.split(x_seq, [1] * th, axis=-3):
        z = T.sigmoid(x_t @ params.wz + h @ params.uz + params.bz)
        r = T.sigmoid(x_t @ params.wr + h @ params.ur + params.br)
        cand = T.tanh(x_t @ params.wh + (r * h) @ params.uh + params.bh)
        h = (1.0 - z) * h + z * cand
        outputs.append(h)
    stacked = T.concat(outputs, axis=-3)
    return T.dropout(stacked, dropout_rate, training, rng)


class Forecaster:
    """The assembled model over a fixed sensor network."""

    def __init__(self, n_nodes: int, steps_per_day: int, model_cfg: ModelConfig,
                 graph_cfg: GraphConfig, normalizer: Normalizer | None = None,
                 predefined_graph: np.ndarray | None = None,
                 dtype=np.float32, seed: int = 0):
        model_cfg.validate()
        graph_cfg.validate_for_nodes(n_nodes)
        self.n_nodes = n_nodes
        self.steps_per_day = steps_per_day
        self.cfg = model_cfg
        self.graph_cfg = graph_cfg
        self.normalizer = normalizer
        self.predefined_graph = None
        if predefined_graph is not None:
            self.predefined_graph = np.asarray(predefined_graph, dtype=dtype)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._build()

    # -- parameter construction -------------------------------------------

    def _matrix(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return self._register(name, data)

    def _embedding(self, name: str, shape) -> Tensor:
        data = (0.01 * self._rng.standard_normal(size=shape)).astype(self.dtype)
        return self._register(name, data)

    def _zeros(self, name: str, shape) -> Tensor:
        return self._register(name, np.zeros(shape, dtype=self.dtype))

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _build(self):
        cfg, n = self.cfg, self.n_nodes
        nd, d_time = cfg.node_embed_dim, cfg.time_embed_dim
        d, m_iter, g_pat, k = cfg.hidden, cfg.rgc_iterations, cfg.patterns, cfg.depth
        heads = self.graph_cfg.heads
        head_dim = self.graph_cfg.resolve_head_dim(n)

        self.pools = TimeEmbeddingPools(
            daily=self._embedding("time_pool.daily", (self.steps_per_day, n, d_time)),
            weekly=self._embedding("time_pool.weekly", (DAYS_PER_WEEK, n, d_time)),
        )

        self.patterns = []
        self.projections = []
        self.rgc_stacks = []
        for g in range(g_pat):
            p = f"pattern{g}"
            emb = SpatialEmbeddings(
                e1=self._embedding(f"{p}.spatial_emb.e1", (n, nd)),
                e2=self._embedding(f"{p}.spatial_emb.e2", (n, nd)),
            )
            spatial_w1 = self._matrix(f"{p}.fusion.spatial.w1", (nd, nd), nd)
            spatial_w2 = self._matrix(f"{p}.fusion.spatial.w2", (nd, nd), nd)
            temporal_w1 = self._matrix(f"{p}.fusion.temporal.w1", (d_time, d_time), d_time)
            temporal_w2 = self._matrix(f"{p}.fusion.temporal.w2", (d_time, d_time), d_time)
            query, key, value = [], [], []
            for h in range(heads):
                query.append(self._matrix(f"{p}.fusion.attn.head{h}.wq", (n, head_dim), n))
                key.append(self._matrix(f"{p}.fusion.attn.head{h}.wk", (n, head_dim), n))
                value.append(self._matrix(f"{p}.fusion.attn.head{h}.wv", (n, head_dim), n))
            fusion = AttentionFusionParams(
                query=query, key=key, value=value,
                output=self._matrix(f"{p}.fusion.attn.wo", (heads * head_dim, n), heads * head_dim),
            )
            self.patterns.append(PatternGraphParams(
                embeddings=emb, spatial_w1=spatial_w1, spatial_w2=spatial_w2,
                temporal_w1=temporal_w1, temporal_w2=temporal_w2, fusion=fusion,
            ))

            self.projections.append((
                self._matrix(f"{p}.project.weight", (cfg.channels, d), cfg.channels),
                self._zeros(f"{p}.project.bias", (d,)),
            ))
            self.rgc_stacks.append([
                RgcParams(gamma=cfg.gamma, depth=k,
                          weight=self._matrix(f"{p}.rgc{m}.weight", (k * d, d), k * d))
                for m in range(m_iter)
            ])

        self.gates = [
            GateParams(
                w1=self._matrix(f"decouple.{g}.w1", (2 * d_time + nd, cfg.gate_hidden),
                                2 * d_time + nd),
                w2=self._matrix(f"decouple.{g}.w2", (cfg.gate_hidden, 1), cfg.gate_hidden),
            )
            for g in range(g_pat - 1)
        ]

        d_in = g_pat * m_iter * d
        d_h = m_iter * d
        self.gru = GruParams(
            wz=self._matrix("gru.wz", (d_in, d_h), d_in),
            wr=self._matrix("gru.wr", (d_in, d_h), d_in),
            wh=self._matrix("gru.wh", (d_in, d_h), d_in),
            uz=self._matrix("gru.uz", (d_h, d_h), d_h),
            ur=self._matrix("gru.ur", (d_h, d_h), d_h),
            uh=self._matrix("gru.uh", (d_h, d_h), d_h),
            bz=self._zeros("gru.bz", (d_h,)),
            br=self._zeros("gru.br", (d_h,)),
            bh=self._zeros("gru.bh", (d_h,)),
        )

        skip = d_h + d_in + cfg.channels + 2 * d_time
        self.head_w1 = self._matrix("head.w1", (skip, cfg.head_hidden), skip)
        self.head_b1 = self._zeros("head.b1", (cfg.head_hidden,))
        self.head_w2 = self._matrix("head.w2", (cfg.head_hidden, cfg.head_channels), cfg.head_hidden)
        self.head_b2 = self._zeros("head.b2", (cfg.head_channels,))
        out_in = cfg.history_steps * cfg.head_channels
        out_dim = cfg.horizon_steps * cfg.channels
        self.head_out_w = self._matrix("head.out.weight", (out_in, out_dim), out_in)
        self.head_out_b = self._zeros("head.out.bias", (out_dim,))

    # -- state handling ----------------------------------------------------

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_state(self, state: dict):
        for name, p in self.params.items():
            if name not in state:
                raise ShapeError(f"checkpoint is missing parameter '{name}'")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(
                    f"parameter '{name}': checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype)

    # -- forward -----------------------------------------------------------

    def adjacency_sets(self, tod, dow) -> list:
        """Per-pattern adjacency sets for the given index arrays [..., Th]."""
        daily_l, weekly_l = self.pools.lookup(np.asarray(tod), np.asarray(dow))
        time_features = temporal_feature_matrix(daily_l, weekly_l)
        return [
            generate_pattern_graph(p, time_features, self.graph_cfg, self.graph_cfg.mode,
                                   self.predefined_graph, dtype=self.dtype)
            for p in self.patterns
        ]

    def forward_batch(self, history, tod, dow, training: bool = False, rng=None,
                      collect: bool = False):
        """Predict [B, Tf, N, C] raw-unit flow from raw histories [B, Th, N, C].

        tod/dow are integer index arrays [B, Th]. Returns the prediction
        tensor, or (prediction, ForwardActivations) when collect is set.
        """
        cfg = self.cfg
        with _stage("normalize"):
            x_raw = np.asarray(history, dtype=self.dtype)
            if (x_raw.shape[-3] != cfg.history_steps or x_raw.shape[-2] != self.n_nodes
                    or x_raw.shape[-1] != cfg.channels):
                raise ShapeError(
                    f"history shaped {x_raw.shape} does not match (Th={cfg.history_steps}, "
                    f"N={self.n_nodes}, C={cfg.channels})")
            xn = Tensor(self.normalizer.apply(x_raw) if self.normalizer else x_raw)

        with _stage("time-lookups"):
            daily_l, weekly_l = self.pools.lookup(np.asarray(tod), np.asarray(dow))
            time_features = temporal_feature_matrix(daily_l, weekly_l)
        with _stage("graph-generation"):
            graphs = [
                generate_pattern_graph(p, time_features, self.graph_cfg, self.graph_cfg.mode,
                                       self.predefined_graph, dtype=self.dtype)
                for p in self.patterns
            ]

        with _stage("decouple"):
            flows = decouple(xn, daily_l, weekly_l, self.patterns[0].embeddings.e1, self.gates)

        with _stage("graph-convolution"):
            pattern_outputs = []
            for g, flow in enumerate(flows.flows):
                w, b = self.projections[g]
                projected = flow @ w + b
                blocks = [rgc_forward(projected, graphs[g].final, rgc)
                          for rgc in self.rgc_stacks[g]]
                pattern_outputs.append(blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=-1))
            x_out = (pattern_outputs[0] if len(pattern_outputs) == 1
                     else T.concat(pattern_outputs, axis=-1))

        with _stage("temporal-sequence"):
            h_out = gru_forward(x_out, self.gru, cfg.dropout, training, rng)

        with _stage("regression-head"):
            h_skip = T.concat([h_out, x_out, xn, daily_l, weekly_l], axis=-1)
            hidden = (T.relu(T.relu(h_skip) @ self.head_w1 + self.head_b1)
                      @ self.head_w2 + self.head_b2)

            # fold time into channels per node, map to the full horizon at once
            nd_ = hidden.ndim
            to_node_major = tuple(range(nd_ - 3)) + (nd_ - 2, nd_ - 3, nd_ - 1)
            per_node = T.transpose(hidden, to_node_major)
            lead = per_node.shape[:-2]
            flat = T.reshape(per_node, lead + (cfg.history_steps * cfg.head_channels,))
            mapped = flat @ self.head_out_w + self.head_out_b
            mapped = T.reshape(mapped, lead + (cfg.horizon_steps, cfg.channels))
            prediction = T.transpose(mapped, to_node_major)

            if self.normalizer:
                prediction = prediction * self.normalizer.std + self.normalizer.mean

        if not collect:
            return prediction
        return prediction, ForwardActivations(graphs=graphs, flows=flows, x_out=x_out,
                                              h_out=h_out, h_skip=h_skip, prediction=prediction)

    def forward_window(self, window, training: bool = False, rng=None) -> ForwardActivations:
        """Run a single TrafficWindow; activations come back without the batch axis."""
        pred, acts = self.forward_batch(window.history[None], window.tod_index[None],
                                        window.dow_index[None], training=training,
                                        rng=rng, collect=True)
        acts.x_out = T.reshape(acts.x_out, acts.x_out.shape[1:])
        acts.h_out = T.reshape(acts.h_out, acts.h_out.shape[1:])
        acts.h_skip = T.reshape(acts.h_skip, acts.h_skip.shape[1:])
        acts.prediction = T.reshape(pred, pred.shape[1:])
        return acts


def parameter_count(model_cfg: ModelConfig, graph_cfg: GraphConfig,
                    n_nodes: int, steps_per_day: int) -> int:
    """Closed-form total parameter count for a model configuration."""
    cfg = model_cfg
    n, nd, dt = n_nodes, cfg.node_embed_dim, cfg.time_embed_dim
    d, m_iter, g_pat, k = cfg.hidden, cfg.rgc_iterations, cfg.patterns, cfg.depth
    heads = graph_cfg.heads
    head_dim = graph_cfg.resolve_head_dim(n)

    pools = steps_per_day * n * dt + DAYS_PER_WEEK * n * dt
    per_pattern = (
        2 * n * nd                       # spatial embeddings
        + 2 * nd * nd + 2 * dt * dt      # score projections
        + heads * 3 * n * head_dim       # attention heads
        + heads * head_dim * n           # attention output
        + cfg.channels * d + d           # input projection
        + m_iter * (k * d * d)           # rgc mixing weights
    )
    gates = (g_pat - 1) * ((2 * dt + nd) * cfg.gate_hidden + cfg.gate_hidden)
    d_in, d_h = g_pat * m_iter * d, m_iter * d
    gru = 3 * d_in * d_h + 3 * d_h * d_h + 3 * d_h
    skip = d_h + d_in + cfg.channels + 2 * dt
    head = (skip * cfg.head_hidden + cfg.head_hidden
            + cfg.head_hidden * cfg.head_channels + cfg.head_channels
            + cfg.history_steps * cfg.head_channels * cfg.horizon_steps * cfg.channels
            + cfg.horizon_steps * cfg.channels)
    return pools + g_pat * per_pattern + gates + gru + head
