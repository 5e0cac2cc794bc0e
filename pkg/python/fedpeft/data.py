"""Synthetic token-classification data and client partitions.

Each class owns a short motif of tokens. A sample of class ``c`` is a run of
noise tokens whose length comes from a class-specific window, with the class
motif placed contiguously at a random offset, then EOS, then padding. The
motif alone identifies the class, so the task is separable by construction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, InputError, ShapeError

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
DATASET_KIND = "fedpeft-dataset"
PARTITION_MODES = ("iid", "dirichlet")


@dataclass(frozen=True)
class SyntheticTask:
    vocab_size: int = 32
    n_classes: int = 3
    max_len: int = 16
    motif_len: int = 3
    min_len: int = 6
    length_shift: int = 0
    length_span: int = 3
    min_noise_tokens: int = 4
    pad_token: int = 0
    eos_token: int = 1

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("model.n_classes", "need at least 2 classes")
        if self.motif_len < 1:
            raise ConfigError("data.motif_len", f"must be >= 1, got {self.motif_len}")
        if self.length_shift < 0 or self.length_span < 0:
            raise ConfigError("data.length_shift", "length shift and span must be non-negative")
        needed = 2 + self.n_classes * self.motif_len + self.min_noise_tokens
        if self.vocab_size < needed:
            raise ConfigError(
                "model.vocab_size",
                f"{self.vocab_size} tokens cannot hold pad, EOS, {self.n_classes}x{self.motif_len} motif "
                f"tokens and {self.min_noise_tokens} noise tokens (need {needed})",
            )
        if self.min_len < self.motif_len:
            raise ConfigError("data.min_len", f"must be >= motif_len ({self.motif_len}), got {self.min_len}")
        longest = self.length_window(self.n_classes - 1)[1]
        if longest + 1 > self.max_len:
            raise ConfigError(
                "data.length_span", f"longest sequence ({longest} + EOS) does not fit max_len {self.max_len}"
            )

    @classmethod
    def from_config(cls, config) -> "SyntheticTask":
        """Build from an :class:`~fedpeft.config.ExperimentConfig`."""
        model, data = config.model, config.data
        return cls(
            vocab_size=model.vocab_size,
            n_classes=model.n_classes,
            max_len=model.max_len,
            motif_len=data.motif_len,
            min_len=data.min_len,
            length_shift=data.length_shift,
            length_span=data.length_span,
            pad_token=model.pad_token,
            eos_token=model.eos_token,
        )

    def _content_tokens(self) -> np.ndarray:
        reserved = {self.pad_token, self.eos_token}
        return np.array([t for t in range(self.vocab_size) if t not in reserved], dtype=np.int64)

    def motif(self, label: int) -> np.ndarray:
        content = self._content_tokens()
        return content[label * self.motif_len : (label + 1) * self.motif_len]

    def noise_tokens(self) -> np.ndarray:
        return self._content_tokens()[self.n_classes * self.motif_len :]

    def length_window(self, label: int) -> tuple[int, int]:
        low = self.min_len + label * self.length_shift
        return low, low + self.length_span


@dataclass(frozen=True, eq=False)
class Dataset:
    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        labels = np.asarray(self.labels, dtype=np.int64)
        if tokens.ndim != 2 or mask.shape != tokens.shape or labels.shape != (tokens.shape[0],):
            raise ShapeError(f"tokens {tokens.shape}, mask {mask.shape}, labels {labels.shape} disagree")
        for name, arr in (("tokens", tokens), ("mask", mask), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.tokens[idx], self.mask[idx], self.labels[idx])

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator["Dataset"]:
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start : start + batch_size])

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.labels, other.labels)
        )


def generate(task: SyntheticTask, n_samples: int, seed) -> Dataset:
    """Draw ``n_samples`` sequences; labels are balanced to within one."""
    if n_samples < task.n_classes:
        raise InputError(f"need at least {task.n_classes} samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % task.n_classes
    rng.shuffle(labels)
    tokens = np.full((n_samples, task.max_len), task.pad_token, dtype=np.int64)
    mask = np.zeros((n_samples, task.max_len), dtype=bool)
    noise = task.noise_tokens()
    for i, label in enumerate(labels):
        low, high = task.length_window(int(label))
        length = int(rng.integers(low, high + 1))
        seq = rng.choice(noise, size=length)
        start = int(rng.integers(0, length - task.motif_len + 1))
        seq[start : start + task.motif_len] = task.motif(int(label))
        tokens[i, :length] = seq
        tokens[i, length] = task.eos_token
        mask[i, : length + 1] = True
    return Dataset(tokens, mask, labels)


def make_splits(task: SyntheticTask, n_train: int, n_val: int, seed) -> tuple[Dataset, Dataset]:
    """Client training pool and server validation split from independent streams."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    train_seed, val_seed = (
        np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (i,)) for i in range(2)
    )
    return generate(task, n_train, train_seed), generate(task, n_val, val_seed)


@dataclass(frozen=True, eq=False)
class Partition:
    """Disjoint, non-empty per-client index arrays into a dataset."""

    shards: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        shards = tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in self.shards)
        if not shards:
            raise InputError("partition needs at least one client")
        for client, shard in enumerate(shards):
            if shard.size == 0:
                raise InputError(f"client {client} has an empty shard")
        object.__setattr__(self, "shards", shards)

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def shard(self, client_id: int) -> np.ndarray:
        return self.shards[client_id]

    def sizes(self) -> list[int]:
        return [int(s.size) for s in self.shards]

    def covers(self, n_samples: int) -> bool:
        """True when the shards are an exact partition of ``range(n_samples)``."""
        joined = np.concatenate(self.shards)
        return joined.size == n_samples and np.array_equal(np.sort(joined), np.arange(n_samples))


def _check_clients(n_clients: int, n_samples: int) -> None:
    if not 1 <= n_clients <= n_samples:
        raise InputError(f"cannot split {n_samples} samples across {n_clients} clients")


def partition_iid(dataset: Dataset, n_clients: int, seed) -> Partition:
    _check_clients(n_clients, len(dataset))
    rng = np.random.default_rng(seed)
    return Partition(tuple(np.array_split(rng.permutation(len(dataset)), n_clients)))


def partition_dirichlet(dataset: Dataset, n_clients: int, alpha: float, seed) -> Partition:
    """Label-skewed split: per class, client proportions ~ Dirichlet(alpha).

    Empty shards are repaired by moving one sample from the largest shard
    (lowest client id among equals).
    """
    if not alpha > 0:
        raise InputError(f"dirichlet alpha must be positive, got {alpha}")
    _check_clients(n_clients, len(dataset))
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for label in np.unique(dataset.labels):
        idx = rng.permutation(np.flatnonzero(dataset.labels == label))
        proportions = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(proportions) * idx.size).astype(np.int64)[:-1]
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(int(i) for i in part)
    shards = [np.array(sorted(b), dtype=np.int64) for b in buckets]
    while True:
        sizes = [s.size for s in shards]
        empty = [c for c, size in enumerate(sizes) if size == 0]
        if not empty:
            break
        donor = int(np.argmax(sizes))
        shards[empty[0]] = shards[donor][-1:]
        shards[donor] = shards[donor][:-1]
    return Partition(tuple(shards))


def export_jsonl(dataset: Dataset, path: str | Path, pad_token: int = 0) -> Path:
    """Write a header line then one ``{"tokens": [...], "label": c}`` record per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": DATASET_KIND,
        "max_len": int(dataset.tokens.shape[1]),
        "pad_token": int(pad_token),
        "n_samples": len(dataset),
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tokens, mask, label in zip(dataset.tokens, dataset.mask, dataset.labels):
            record = {"tokens": [int(t) for t in tokens[mask]], "label": int(label)}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def import_jsonl(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise InputError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("kind") != DATASET_KIND or header.get("format_version") != DATASET_FORMAT_VERSION:
        raise InputError(f"{path}: not a version {DATASET_FORMAT_VERSION} {DATASET_KIND} file")
    max_len, pad = int(header["max_len"]), int(header["pad_token"])
    records = [json.loads(line) for line in lines[1:]]
    if len(records) != header.get("n_samples", len(records)):
        raise InputError(f"{path}: header announces {header['n_samples']} samples, found {len(records)}")
    tokens = np.full((len(records), max_len), pad, dtype=np.int64)
    mask = np.zeros((len(records), max_len), dtype=bool)
    labels = np.zeros(len(records), dtype=np.int64)
    for i, record in enumerate(records):
        seq = record["tokens"]
        if len(seq) > max_len:
            raise InputError(f"{path}: record {i} longer than max_len {max_len}")
        tokens[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
        labels[i] = record["label"]
    return Dataset(tokens, mask, labels)
