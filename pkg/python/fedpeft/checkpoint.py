"""Adapter checkpoints.

A checkpoint is a JSON document holding the model config, the experiment seed
(the frozen backbone is rebuilt from it) and every trainable value. Periodic
checkpoints are named ``checkpoint-<round>.json`` and rotated; ``final.json``
is written once at the end of a run and never rotated.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InputError
from .lora import LoraAdapter
from .model import ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
FINAL_NAME = "final.json"
_PERIODIC = re.compile(r"^checkpoint-(\d+)\.json$")


@dataclass(frozen=True)
class CheckpointInfo:
    round: int
    path: Path
    size_bytes: int


@dataclass(eq=False)
class Checkpoint:
    round: int
    seed: int
    model_config: ModelConfig
    adapter: LoraAdapter
    experiment: dict[str, Any] | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "round": self.round,
            "seed": self.seed,
            "model": dataclasses.asdict(self.model_config),
            "experiment": self.experiment,
            "adapter": {
                "a": self.adapter.a.tolist(),
                "b": self.adapter.b.tolist(),
                "head": self.adapter.head.tolist(),
            },
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "Checkpoint":
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint format version {doc.get('format_version')!r}")
        adapter = doc["adapter"]
        return cls(
            round=int(doc["round"]),
            seed=int(doc["seed"]),
            model_config=ModelConfig(**doc["model"]),
            adapter=LoraAdapter(np.array(adapter["a"]), np.array(adapter["b"]), np.array(adapter["head"])),
            experiment=doc.get("experiment"),
        )


def write_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Atomically write ``checkpoint`` to ``path`` (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".json", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(checkpoint.to_json(), fh)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        return Checkpoint.from_json(json.load(fh))


class CheckpointManager:
    """Writes, rotates and loads checkpoints in one directory."""

    def __init__(self, directory: str | Path, keep_count: int = 5):
        if keep_count < 1:
            raise InputError(f"keep_count must be >= 1, got {keep_count}")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.keep_count = keep_count

    def save(self, checkpoint: Checkpoint, final: bool = False) -> Path:
        name = FINAL_NAME if final else f"checkpoint-{checkpoint.round}.json"
        path = write_checkpoint(checkpoint, self.directory / name)
        logger.debug("wrote checkpoint %s", path)
        if not final:
            self._rotate()
        return path

    def _rotate(self) -> None:
        for info in self.all_checkpoints()[: -self.keep_count]:
            info.path.unlink(missing_ok=True)
            logger.debug("removed old checkpoint %s", info.path)

    def all_checkpoints(self) -> list[CheckpointInfo]:
        """Periodic checkpoints, oldest round first."""
        infos = []
        for entry in self.directory.iterdir():
            match = _PERIODIC.match(entry.name)
            if match:
                infos.append(CheckpointInfo(int(match.group(1)), entry, entry.stat().st_size))
        return sorted(infos, key=lambda info: info.round)

    def get_by_round(self, round: int) -> CheckpointInfo | None:
        for info in self.all_checkpoints():
            if info.round == round:
                return info
        return None

    def latest(self) -> Checkpoint | None:
        final = self.directory / FINAL_NAME
        if final.is_file():
            return read_checkpoint(final)
        infos = self.all_checkpoints()
        return read_checkpoint(infos[-1].path) if infos else None

    def load(self, round: int) -> Checkpoint:
        info = self.get_by_round(round)
        if info is None:
            raise FileNotFoundError(f"no checkpoint for round {round} in {self.directory}")
        return read_checkpoint(info.path)
