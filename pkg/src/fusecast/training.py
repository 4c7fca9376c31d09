"""Loss, metrics, schedules, the training loop, and the ablation harness.

The loss is masked mean absolute error on denormalized predictions:
entries whose ground truth is exactly 0 are treated as missing and drop
out of both numerator and denominator. Training follows a warm-up phase on
the full horizon, then a curriculum that restarts at a one-step horizon
and grows it by one step every `curriculum_step` epochs.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig, TrainConfig
from .data import (WindowSet, fit_normalizer, load_predefined_graph, load_series,
                   split_and_window)
from .errors import ConfigError, NumericalError, ShapeError
from .network import Forecaster
from .optim import Adam
from .tensor import Tape, Tensor

ABLATION_VARIANTS = ("full", "use_pg", "use_tg", "use_sg", "no_decouple", "g2", "g3")


def masked_mae_loss(pred: Tensor, target: np.ndarray, horizon_limit: int | None = None) -> Tensor:
    """Mean |pred - target| over entries with target > 0, first `horizon_limit` steps.

    An empty mask yields a zero loss, a warning, and bumps
    masked_mae_loss.empty_mask_count.
    """
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    horizon = pred.shape[-3]
    if horizon_limit is not None and horizon_limit < horizon:
        pred = T.narrow(pred, pred.ndim - 3, 0, horizon_limit)
        target = target[..., :horizon_limit, :, :]
    mask = (target > 0).astype(pred.dtype)
    count = mask.sum()
    if count == 0:
        masked_mae_loss.empty_mask_count += 1
        warnings.warn("loss mask is empty (all targets zero); returning 0")
        return Tensor(np.zeros((), dtype=pred.dtype))
    err = T.abs_(pred - Tensor(target.astype(pred.dtype)))
    return (err * mask).sum() * (1.0 / count)


masked_mae_loss.empty_mask_count = 0


@dataclass
class MetricReport:
    """Masked MAE / RMSE / MAPE(%), averaged and per prediction horizon."""

    mae: float
    rmse: float
    mape: float
    mae_per_horizon: list = field(default_factory=list)
    rmse_per_horizon: list = field(default_factory=list)
    mape_per_horizon: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae, "rmse": self.rmse, "mape": self.mape,
            "per_horizon": {
                "mae": self.mae_per_horizon,
                "rmse": self.rmse_per_horizon,
                "mape": self.mape_per_horizon,
            },
        }


class _MetricAccumulator:
    """Streaming per-horizon sums so evaluation never stores all predictions."""

    def __init__(self, horizon: int, mask_threshold: float):
        self.h = horizon
        self.thr = mask_threshold
        self.abs_sum = np.zeros(horizon)
        self.sq_sum = np.zeros(horizon)
        self.ape_sum = np.zeros(horizon)
        self.count = np.zeros(horizon)
        self.ape_count = np.zeros(horizon)

    def add(self, pred: np.ndarray, target: np.ndarray):
        axes = (0,) + tuple(range(2, target.ndim))  # everything except the horizon axis
        mask = target > 0
        diff = np.abs(pred - target)
        self.abs_sum += (diff * mask).sum(axis=axes)
        self.sq_sum += (np.square(pred - target) * mask).sum(axis=axes)
        self.count += mask.sum(axis=axes)
        pmask = target > self.thr
        with np.errstate(divide="ignore", invalid="ignore"):
            ape = np.where(pmask, diff / np.where(pmask, target, 1.0), 0.0)
        self.ape_sum += ape.sum(axis=axes)
        self.ape_count += pmask.sum(axis=axes)

    def report(self) -> MetricReport:
        safe = np.maximum(self.count, 1)
        safe_ape = np.maximum(self.ape_count, 1)
        mae_h = self.abs_sum / safe
        rmse_h = np.sqrt(self.sq_sum / safe)
        mape_h = 100.0 * self.ape_sum / safe_ape
        total = max(self.count.sum(), 1)
        total_ape = max(self.ape_count.sum(), 1)
        return MetricReport(
            mae=float(self.abs_sum.sum() / total),
            rmse=float(np.sqrt(self.sq_sum.sum() / total)),
            mape=float(100.0 * self.ape_sum.sum() / total_ape),
            mae_per_horizon=[float(v) for v in mae_h],
            rmse_per_horizon=[float(v) for v in rmse_h],
            mape_per_horizon=[float(v) for v in mape_h],
        )


def metrics(pred: np.ndarray, target: np.ndarray, mask_threshold: float = 0.0) -> MetricReport:
    """Masked metrics for raw-unit predictions shaped [..., Tf, N, C]."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    acc = _MetricAccumulator(pred.shape[1], mask_threshold)
    acc.add(pred, target)
    return acc.report()


def curriculum_horizon(epoch: int, cfg: TrainConfig, full_horizon: int) -> int:
    """Supervised horizon for an epoch: full during warm-up, then growing from 1."""
    if epoch <= cfg.warmup_epochs:
        return full_horizon
    return min(full_horizon, 1 + (epoch - cfg.warmup_epochs - 1) // cfg.curriculum_step)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Base rate decayed once per milestone reached; optional warm-up ramp."""
    passed = sum(1 for m in cfg.milestones if epoch >= m)
    lr = cfg.learning_rate * (cfg.lr_decay ** passed)
    if cfg.lr_ramp and cfg.warmup_epochs > 0 and epoch <= cfg.warmup_epochs:
        lr *= epoch / cfg.warmup_epochs
    return lr


def evaluate(model: Forecaster, windows: WindowSet, batch_size: int = 64,
             mask_threshold: float = 0.0) -> MetricReport:
    """Masked metrics of the model over every window of a split."""
    acc = _MetricAccumulator(model.cfg.horizon_steps, mask_threshold)
    for start in range(0, len(windows), batch_size):
        idx = np.arange(start, min(start + batch_size, len(windows)))
        hist, targ, tod, dow = windows.batch(idx)
        pred = model.forward_batch(hist, tod, dow, training=False)
        acc.add(pred.data.astype(np.float64), targ)
    return acc.report()


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_mae: float
    best_state: dict
    val_report: MetricReport


def train(model: Forecaster, train_ws: WindowSet, val_ws: WindowSet, cfg: TrainConfig,
          out_dir=None, log=None) -> TrainResult:
    """Mini-batch Adam training with curriculum horizon and best-val selection.

    Writes history.jsonl and checkpoint.bin under out_dir when given. All
    randomness (shuffling, dropout) derives from cfg.seed, so identical
    configs reproduce identical artifacts byte for byte.
    """
    cfg.validate()
    optimizer = Adam(model.parameters(), learning_rate=cfg.learning_rate,
                     eps=cfg.eps, weight_decay=cfg.weight_decay)
    seed_root = np.random.SeedSequence(cfg.seed)
    shuffle_seed, dropout_seed = seed_root.spawn(2)

    history = []
    best = (0, np.inf, model.state())
    since_best = 0
    history_path = Path(out_dir) / "history.jsonl" if out_dir else None
    if history_path:
        history_path.write_text("")

    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_schedule(epoch, cfg)
        horizon = curriculum_horizon(epoch, cfg, model.cfg.horizon_steps)
        optimizer.set_lr(lr)

        order = np.random.default_rng(shuffle_seed.spawn(1)[0]).permutation(len(train_ws))
        epoch_dropout = np.random.default_rng(dropout_seed.spawn(1)[0])
        # mask-weighted so the epoch loss is independent of batch grouping
        err_total, mask_total = 0.0, 0
        for batch_no, start in enumerate(range(0, len(train_ws), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            hist, targ, tod, dow = train_ws.batch(idx)
            optimizer.zero_grad()
            with Tape() as tape:
                pred = model.forward_batch(hist, tod, dow, training=True, rng=epoch_dropout)
                loss = masked_mae_loss(pred, targ, horizon)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss {value} at epoch {epoch}, batch {batch_no} "
                        f"(window indices {idx[:8].tolist()}...)")
                tape.backward(loss)
            optimizer.step()
            n_masked = int((targ[:, :horizon] > 0).sum())
            err_total += value * n_masked
            mask_total += n_masked

        val_report = evaluate(model, val_ws, batch_size=max(cfg.batch_size, 64),
                              mask_threshold=cfg.mask_threshold)
        record = {
            "epoch": epoch, "lr": lr, "horizon": horizon,
            "train_loss": err_total / max(mask_total, 1),
            "val_mae": val_report.mae, "val_rmse": val_report.rmse,
            "val_mape": val_report.mape,
        }
        history.append(record)
        if history_path:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if log:
            log(record)

        if val_report.mae < best[1]:
            best = (epoch, val_report.mae, model.state())
            since_best = 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                break

    model.load_state(best[2])
    final_val = evaluate(model, val_ws, batch_size=max(cfg.batch_size, 64),
                         mask_threshold=cfg.mask_threshold)
    if out_dir:
        save_checkpoint(Path(out_dir) / "checkpoint.bin", best[2])
    return TrainResult(history=history, best_epoch=best[0], best_val_mae=best[1],
                       best_state=best[2], val_report=final_val)


def prepare_data(cfg: RunConfig):
    """Load the configured series, split it, and fit the normalizer."""
    if not cfg.data.series:
        raise ConfigError("data.series must point at a series CSV")
    series = load_series(cfg.data.series, cfg.data.meta or None)
    train_ws, val_ws, test_ws = split_and_window(
        series, cfg.model.history_steps, cfg.model.horizon_steps, tuple(cfg.train.split))
    normalizer = fit_normalizer(train_ws)
    return series, train_ws, val_ws, test_ws, normalizer


def build_model(cfg: RunConfig, series, normalizer, dtype=np.float32) -> Forecaster:
    predefined = None
    if cfg.graph.mode == "predefined":
        if not cfg.data.graph:
            raise ConfigError("graph.mode=predefined requires data.graph")
        predefined = load_predefined_graph(cfg.data.graph, series.n_nodes,
                                           cfg.data.directed_graph).adjacency
    return Forecaster(series.n_nodes, series.steps_per_day, cfg.model, cfg.graph,
                      normalizer=normalizer, predefined_graph=predefined,
                      dtype=dtype, seed=cfg.train.seed)


def run_training(cfg: RunConfig, out_dir=None, log=None):
    """End-to-end: data prep, model build, train, and test-split evaluation."""
    series, train_ws, val_ws, test_ws, normalizer = prepare_data(cfg)
    model = build_model(cfg, series, normalizer)
    result = train(model, train_ws, val_ws, cfg.train, out_dir=out_dir, log=log)
    test_report = evaluate(model, test_ws, batch_size=max(cfg.train.batch_size, 64),
                           mask_threshold=cfg.train.mask_threshold)
    if out_dir:
        report = {"val": result.val_report.to_dict(), "test": test_report.to_dict(),
                  "best_epoch": result.best_epoch}
        (Path(out_dir) / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    return model, result, test_report


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Rewrite a config for one ablation variant."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    if variant == "use_pg":
        cfg.graph.mode = "predefined"
        if not cfg.data.graph:
            raise ConfigError("variant use_pg requires data.graph to point at an edge list")
    elif variant == "use_tg":
        cfg.graph.mode = "temporal_only"
    elif variant == "use_sg":
        cfg.graph.mode = "spatial_only"
    elif variant == "no_decouple":
        cfg.model.patterns = 1
    elif variant == "g2":
        cfg.model.patterns = 2
    elif variant == "g3":
        cfg.model.patterns = 3
    return cfg


def ablate(variant: str, cfg: RunConfig, out_dir=None, log=None) -> MetricReport:
    """Train and evaluate one ablation variant; returns the test report."""
    cfg = apply_variant(cfg, variant)
    _, _, test_report = run_training(cfg, out_dir=out_dir, log=log)
    return test_report
