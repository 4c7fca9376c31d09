"""Run configuration: dataclasses, flat key=value files, and presets.

Config files are plain `section.key = value` lines (comments with '#').
Every key is validated against the schema before any compute happens and
unknown keys are rejected, so a config file plus the echoed overrides in
the run manifest fully reproduce a run.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import ConfigError

GRAPH_MODES = ("fused", "spatial_only", "temporal_only", "predefined")


@dataclass
class ModelConfig:
    history_steps: int = 12      # Th
    horizon_steps: int = 12      # Tf
    channels: int = 1            # C
    patterns: int = 2            # G, decoupled traffic pattern count
    rgc_iterations: int = 2      # M, parallel graph-conv blocks per pattern
    hidden: int = 32             # d, channel width after input projection
    depth: int = 3               # K, propagation depth within one block
    gamma: float = 0.1           # input retention ratio
    dropout: float = 0.1
    node_embed_dim: int = 12     # Nd
    time_embed_dim: int = 12     # D
    gate_hidden: int = 32
    head_hidden: int = 64
    head_channels: int = 64

    def validate(self):
        for name in ("history_steps", "horizon_steps", "channels", "patterns",
                     "rgc_iterations", "hidden", "depth", "node_embed_dim",
                     "time_embed_dim", "gate_hidden", "head_hidden", "head_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"model.gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must be in [0, 1), got {self.dropout}")


@dataclass
class GraphConfig:
    alpha: float = 3.0           # saturation rate of the score construction
    beta: float = 3.0            # saturation rate of the fusion product
    k_spatial: int = 10          # Ks, retained entries per spatial row
    k_temporal: int = 10         # Kt
    heads: int = 4
    head_dim: int = 0            # 0 = derive from node count at model build
    mode: str = "fused"

    def validate(self):
        if self.mode not in GRAPH_MODES:
            raise ConfigError(f"graph.mode must be one of {GRAPH_MODES}, got {self.mode!r}")
        if self.heads < 1:
            raise ConfigError(f"graph.heads must be >= 1, got {self.heads}")
        if self.head_dim < 0:
            raise ConfigError(f"graph.head_dim must be >= 0, got {self.head_dim}")

    def resolve_head_dim(self, n_nodes: int) -> int:
        """Default head width: N/4 floored with a minimum of 8, clamped so
        heads * head_dim never exceeds the node count."""
        if self.head_dim:
            return self.head_dim
        return max(1, min(max(8, n_nodes // 4), n_nodes // self.heads))

    def validate_for_nodes(self, n_nodes: int):
        self.validate()
        if self.k_spatial > n_nodes:
            raise ConfigError(f"graph.k_spatial={self.k_spatial} exceeds node count {n_nodes}")
        if self.k_temporal > n_nodes:
            raise ConfigError(f"graph.k_temporal={self.k_temporal} exceeds node count {n_nodes}")
        head_dim = self.resolve_head_dim(n_nodes)
        if self.heads * head_dim > n_nodes:
            raise ConfigError(
                f"graph.heads*head_dim = {self.heads}*{head_dim} exceeds node count {n_nodes}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.004
    weight_decay: float = 1e-5
    eps: float = 1e-8
    lr_decay: float = 0.5
    milestones: list = field(default_factory=lambda: [50, 80])
    warmup_epochs: int = 20
    curriculum_step: int = 3
    max_epochs: int = 100
    seed: int = 1
    mask_threshold: float = 0.0
    patience: int = 20
    lr_ramp: bool = False        # optional linear lr ramp over the warm-up epochs
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 0:
            raise ConfigError(f"train.warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.curriculum_step < 1:
            raise ConfigError(f"train.curriculum_step must be >= 1, got {self.curriculum_step}")
        if self.max_epochs < 1:
            raise ConfigError(f"train.max_epochs must be >= 1, got {self.max_epochs}")
        if sorted(self.milestones) != list(self.milestones):
            raise ConfigError(f"train.milestones must be sorted ascending, got {self.milestones}")
        if len(self.split) != 3:
            raise ConfigError(f"train.split needs three ratios, got {self.split}")


@dataclass
class DataConfig:
    series: str = ""
    meta: str = ""
    graph: str = ""
    directed_graph: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    overrides: list = field(default_factory=list)

    def validate(self):
        self.model.validate()
        self.graph.validate()
        self.train.validate()
        if self.graph.mode == "predefined" and not self.data.graph:
            raise ConfigError("graph.mode=predefined requires data.graph to point at an edge list")

    def manifest(self) -> dict:
        out = {
            "model": asdict(self.model),
            "graph": asdict(self.graph),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "overrides": list(self.overrides),
        }
        return out


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> list:
    raw = raw.strip()
    return [int(x) for x in raw.split(",")] if raw else []


def _parse_float_list(raw: str) -> list:
    raw = raw.strip()
    return [float(x) for x in raw.split(",")] if raw else []


_SECTIONS = {"model": ModelConfig, "graph": GraphConfig, "train": TrainConfig, "data": DataConfig}

_PARSERS = {
    int: int,
    float: float,
    str: lambda s: s.strip(),
    bool: _parse_bool,
}


def _field_types():
    table = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name == "milestones":
                parser = _parse_int_list
            elif f.name == "split":
                parser = _parse_float_list
            else:
                parser = _PARSERS[f.type if isinstance(f.type, type) else eval(f.type)]
            table[f"{section}.{f.name}"] = parser
    return table


_SCHEMA = _field_types()


def schema_keys():
    return sorted(_SCHEMA)


def apply_assignment(cfg: RunConfig, key: str, raw_value: str):
    """Set one `section.field = value` assignment, validating the key path."""
    key = key.strip()
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key: {key}")
    section, name = key.split(".", 1)
    try:
        value = _SCHEMA[key](raw_value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    setattr(getattr(cfg, section), name, value)


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from an optional file plus `key=value` overrides."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected key = value, got {line!r}")
            key, raw = stripped.split("=", 1)
            apply_assignment(cfg, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        apply_assignment(cfg, key, raw)
        cfg.overrides.append(item)
    cfg.validate()
    return cfg


def preset_path(name: str) -> Path:
    """Resolve a shipped preset (pems03/pems04/pems07/pems08/toy) to a path."""
    resource = importlib.resources.files("fusecast") / "presets" / f"{name}.cfg"
    if not resource.is_file():
        raise ConfigError(f"unknown preset: {name}")
    return Path(str(resource))


def write_manifest(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.manifest(), indent=2, sort_keys=True) + "\n")
