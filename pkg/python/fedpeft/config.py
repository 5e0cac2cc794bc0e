"""Experiment configuration: one frozen dataclass per TOML table.

Example ``config.toml``::

    [experiment]
    seed = 7
    rounds = 40

    [pruning]
    mode = "importance"
    sparsity = 0.5

Every key has a default. Unknown tables and keys are rejected, and every
validation failure raises :class:`~fedpeft.errors.ConfigError` naming the
offending ``section.key``.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .aggregation import AGGREGATION_MODES
from .data import PARTITION_MODES
from .errors import ConfigError
from .importance import IMPORTANCE_MODES
from .logs import LEVELS
from .model import ModelConfig
from .selection import SELECTION_MODES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRUNING_MODES = ("none", "random", "importance")


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(key, message)


def _choice(value: str, allowed: tuple[str, ...], key: str) -> None:
    _require(value in allowed, key, f"{value!r} is not one of {', '.join(allowed)}")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "fedpeft"
    seed: int = 0
    rounds: int = 100
    accuracy_threshold: float = 0.9

    def __post_init__(self) -> None:
        _require(self.seed >= 0, "experiment.seed", "must be non-negative")
        _require(self.rounds >= 0, "experiment.rounds", "must be non-negative")
        _require(0.0 < self.accuracy_threshold <= 1.0, "experiment.accuracy_threshold", "must be in (0, 1]")


@dataclass(frozen=True)
class DataSection:
    train_samples: int = 480
    val_samples: int = 150
    motif_len: int = 3
    min_len: int = 6
    length_shift: int = 0
    length_span: int = 3
    partition: str = "iid"
    dirichlet_alpha: float = 0.5

    def __post_init__(self) -> None:
        _require(self.train_samples >= 1, "data.train_samples", "must be >= 1")
        _require(self.val_samples >= 1, "data.val_samples", "must be >= 1")
        _choice(self.partition, PARTITION_MODES, "data.partition")
        _require(self.dirichlet_alpha > 0, "data.dirichlet_alpha", "must be positive")


@dataclass(frozen=True)
class FederationSection:
    n_clients: int = 8
    clients_per_round: int = 2
    selection: str = "random"
    threads: int = 1

    def __post_init__(self) -> None:
        _require(self.n_clients >= 1, "federation.n_clients", "must be >= 1")
        _require(
            1 <= self.clients_per_round <= self.n_clients,
            "federation.clients_per_round",
            f"must be in [1, n_clients={self.n_clients}], got {self.clients_per_round}",
        )
        _choice(self.selection, SELECTION_MODES, "federation.selection")
        _require(self.threads >= 1, "federation.threads", "must be >= 1")


@dataclass(frozen=True)
class TrainingSection:
    local_epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 5e-4

    def __post_init__(self) -> None:
        _require(self.local_epochs >= 0, "training.local_epochs", "must be non-negative")
        _require(self.batch_size >= 1, "training.batch_size", "must be >= 1")
        _require(self.learning_rate > 0 and math.isfinite(self.learning_rate), "training.learning_rate", "must be positive")


@dataclass(frozen=True)
class PruningSection:
    mode: str = "none"
    sparsity: float = 0.0
    importance_mode: str = "softmax"

    def __post_init__(self) -> None:
        _choice(self.mode, PRUNING_MODES, "pruning.mode")
        _require(0.0 <= self.sparsity < 1.0, "pruning.sparsity", f"must be in [0, 1), got {self.sparsity}")
        _choice(self.importance_mode, IMPORTANCE_MODES, "pruning.importance_mode")


@dataclass(frozen=True)
class AggregationSection:
    mode: str = "fedavg"
    server_lr: float = 1.0
    epsilon: float = 1e-8
    wire_roundtrip: bool = False

    def __post_init__(self) -> None:
        _choice(self.mode, AGGREGATION_MODES, "aggregation.mode")
        _require(self.server_lr > 0, "aggregation.server_lr", "must be positive")
        _require(self.epsilon > 0, "aggregation.epsilon", "must be positive")


@dataclass(frozen=True)
class CheckpointSection:
    every: int = 0
    keep_count: int = 5

    def __post_init__(self) -> None:
        _require(self.every >= 0, "checkpoint.every", "must be non-negative (0 disables periodic checkpoints)")
        _require(self.keep_count >= 1, "checkpoint.keep_count", "must be >= 1")


@dataclass(frozen=True)
class LoggingSection:
    level: str = "info"
    json: bool = False

    def __post_init__(self) -> None:
        _choice(self.level, tuple(LEVELS), "logging.level")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    federation: FederationSection = field(default_factory=FederationSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    pruning: PruningSection = field(default_factory=PruningSection)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    checkpoint: CheckpointSection = field(default_factory=CheckpointSection)
    logging: LoggingSection = field(default_factory=LoggingSection)

    def __post_init__(self) -> None:
        _require(
            self.federation.n_clients <= self.data.train_samples,
            "federation.n_clients",
            f"{self.federation.n_clients} clients cannot share {self.data.train_samples} training samples",
        )
        _require(
            self.data.train_samples >= self.model.n_classes,
            "data.train_samples",
            f"need at least one sample per class ({self.model.n_classes})",
        )

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(sections))
        if unknown:
            raise ConfigError(unknown[0], f"unknown section; expected one of {', '.join(sections)}")
        built = {}
        for name, f in sections.items():
            section_type = _SECTION_TYPES[name]
            table = raw.get(name, {})
            if not isinstance(table, Mapping):
                raise ConfigError(name, "must be a table")
            built[name] = _build_section(name, section_type, table)
        return cls(**built)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in fields(self)}


_SECTION_TYPES: dict[str, type] = {
    "experiment": ExperimentSection,
    "model": ModelConfig,
    "data": DataSection,
    "federation": FederationSection,
    "training": TrainingSection,
    "pruning": PruningSection,
    "aggregation": AggregationSection,
    "checkpoint": CheckpointSection,
    "logging": LoggingSection,
}


def _coerce(key: str, expected: str, value: Any) -> Any:
    if expected == "bool":
        if isinstance(value, bool):
            return value
    elif expected == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif expected == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif expected == "str":
        if isinstance(value, str):
            return value
    raise ConfigError(key, f"expected {expected}, got {type(value).__name__} {value!r}")


def _build_section(name: str, section_type: type, table: Mapping[str, Any]):
    known = {f.name: f for f in fields(section_type)}
    values = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        values[key] = _coerce(f"{name}.{key}", str(known[key].type), value)
    return section_type(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        ConfigError: The file is not valid TOML or a value is invalid.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def parse_override(text: str) -> tuple[str, Any]:
    """Split ``section.key=value``; the value is read as a TOML scalar, else kept as a string."""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or "." not in key:
        raise ConfigError(key or text, "override must look like section.key=value")
    value = value.strip()
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key, parsed


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Return a new validated config with dotted ``section.key`` values replaced."""
    raw = config.to_dict()
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in raw:
            raise ConfigError(dotted, "unknown section")
        if key not in raw[section]:
            raise ConfigError(dotted, "unknown key")
        raw[section][key] = value
    return ExperimentConfig.from_dict(raw)


def config_to_toml(config: ExperimentConfig) -> str:
    """Render a config as TOML (all defaults materialized)."""
    lines = []
    for section, table in config.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            if isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, str):
                rendered = '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
            else:
                rendered = repr(value)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)
