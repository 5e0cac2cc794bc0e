"""Federated rounds: select, broadcast, prune, train locally, upload, merge, evaluate.

Example:
    >>> from fedpeft.config import ExperimentConfig, apply_overrides
    >>> config = apply_overrides(ExperimentConfig(), {"experiment.rounds": 3, "training.learning_rate": 0.1})
    >>> result = run_experiment(config)
    >>> result.metrics[-1].accuracy
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .aggregation import GlobalState, aggregate
from .checkpoint import Checkpoint, CheckpointManager
from .config import ExperimentConfig
from .costs import PeftMethod, toy_arch, training_ops
from .data import Dataset, SyntheticTask, make_splits, partition_dirichlet, partition_iid
from .errors import InputError, NumericalError
from .importance import ImportanceMatrix, compute_importance, mean_pairwise_distance, prune_by_sparsity, random_prune_mask
from .lora import LoraAdapter, PruneMask, freeze_pruned
from .model import MiniTransformer
from .selection import ClientLedger, select_random, select_top_k
from .wire import ClientUpdate, decode_update, encode_update

logger = logging.getLogger(__name__)

METRICS_FORMAT_VERSION = 2
SUMMARY_COLUMNS = ("round", "accuracy", "loss", "bytes", "ops", "selected")

# Seed stream keys under the experiment seed.
STREAM_BACKBONE = 0
STREAM_ADAPTER = 1
STREAM_DATA = 2
STREAM_PARTITION = 3
STREAM_SELECTION = 4
STREAM_CLIENT = 5
STREAM_PRUNING = 6


def seed_stream(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=key)


def client_rng(seed: int, round: int, client_id: int) -> np.random.Generator:
    """Local RNG of one client in one round; independent of scheduling."""
    return np.random.default_rng(seed_stream(seed, STREAM_CLIENT, round, client_id))


def pruning_rng(seed: int, round: int, client_id: int) -> np.random.Generator:
    """Random-pruning draws of one client in one round, apart from its batch order."""
    return np.random.default_rng(seed_stream(seed, STREAM_PRUNING, round, client_id))


def backbone_for(model_config, seed: int) -> MiniTransformer:
    return MiniTransformer.from_seed(model_config, seed_stream(seed, STREAM_BACKBONE))


def _as_rows(matrix) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in row) for row in np.asarray(matrix))


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    loss: float
    sample_count: int
    bytes: int
    ops: float
    kept_heads: int
    importance: tuple[tuple[float, ...], ...]
    scores: tuple[tuple[float, ...], ...] = ()


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    selected: tuple[int, ...]
    accuracy: float
    loss: float
    clients: tuple[ClientReport, ...]
    importance_distance: float
    importance_mean: tuple[tuple[float, ...], ...] = ()
    importance_shift: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def bytes_total(self) -> int:
        return sum(c.bytes for c in self.clients)

    @property
    def ops_total(self) -> float:
        return sum(c.ops for c in self.clients)

    @property
    def client_loss(self) -> dict[int, float]:
        return {c.client_id: c.loss for c in self.clients}

    @property
    def client_bytes(self) -> dict[int, int]:
        return {c.client_id: c.bytes for c in self.clients}

    def to_record(self) -> dict[str, Any]:
        """JSON-ready record; wall time is left out so reruns are byte-identical."""
        return {
            "format_version": METRICS_FORMAT_VERSION,
            "round": self.round,
            "selected": list(self.selected),
            "accuracy": self.accuracy,
            "loss": self.loss,
            "bytes": self.bytes_total,
            "ops": self.ops_total,
            "importance_distance": self.importance_distance,
            "importance_mean": [list(row) for row in self.importance_mean],
            "importance_shift": self.importance_shift,
            "clients": [
                {
                    "client": c.client_id,
                    "loss": c.loss,
                    "samples": c.sample_count,
                    "bytes": c.bytes,
                    "ops": c.ops,
                    "kept_heads": c.kept_heads,
                    "importance": [list(row) for row in c.importance],
                    "scores": [list(row) for row in c.scores],
                }
                for c in self.clients
            ],
        }


def convergence_round(metrics: Sequence[RoundMetrics], threshold: float) -> int | None:
    """First round whose validation accuracy reaches ``threshold``."""
    for m in metrics:
        if m.accuracy >= threshold:
            return m.round
    return None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    final_adapter: LoraAdapter
    initial_loss: float
    initial_accuracy: float
    convergence_round: int | None
    run_dir: Path | None = None
    checkpoint_path: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy if self.metrics else self.initial_accuracy

    @property
    def total_bytes(self) -> int:
        return sum(m.bytes_total for m in self.metrics)

    @property
    def total_ops(self) -> float:
        return sum(m.ops_total for m in self.metrics)


class FederatedSimulation:
    """Owns the frozen backbone, the data, the ledger and the global state of one run."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        seed = config.experiment.seed
        self.model = backbone_for(config.model, seed)
        self.task = SyntheticTask.from_config(config)
        self.train_set, self.val_set = make_splits(
            self.task, config.data.train_samples, config.data.val_samples, seed_stream(seed, STREAM_DATA)
        )
        n_clients = config.federation.n_clients
        if config.data.partition == "dirichlet":
            self.partition = partition_dirichlet(
                self.train_set, n_clients, config.data.dirichlet_alpha, seed_stream(seed, STREAM_PARTITION)
            )
        else:
            self.partition = partition_iid(self.train_set, n_clients, seed_stream(seed, STREAM_PARTITION))
        self.arch = toy_arch(config.model)
        adapter = LoraAdapter.initialize(config.model, np.random.default_rng(seed_stream(seed, STREAM_ADAPTER)))
        self.state = GlobalState(adapter, 0, config.aggregation.server_lr, config.aggregation.epsilon)
        self.ledger = ClientLedger(n_clients)
        self._selection_rng = np.random.default_rng(seed_stream(seed, STREAM_SELECTION))
        self.history: list[RoundMetrics] = []
        self.initial_loss, self.initial_accuracy = self.model.evaluate(adapter, self.val_set)
        self.ledger.set_global_loss(self.initial_loss)

    def client_data(self, client_id: int) -> Dataset:
        return self.train_set.subset(self.partition.shard(client_id))

    def _mask_for(self, importance: ImportanceMatrix, round: int, client_id: int) -> tuple[PruneMask, ImportanceMatrix]:
        pruning = self.config.pruning
        L, H = importance.scores.shape
        if pruning.mode == "importance":
            return prune_by_sparsity(importance, pruning.sparsity)
        if pruning.mode == "random":
            mask = random_prune_mask(L, H, pruning.sparsity, pruning_rng(self.config.experiment.seed, round, client_id))
            return mask, importance.thresholded(mask)
        return PruneMask.all_keep(L, H), importance

    def local_train(self, client_id: int, global_adapter: LoraAdapter, round: int) -> ClientUpdate:
        """Importance, mask and E epochs of mini-batch GD on one client's shard."""
        update, _ = self._local_round(client_id, global_adapter, round)
        return update

    def _local_round(
        self, client_id: int, global_adapter: LoraAdapter, round: int
    ) -> tuple[ClientUpdate, ImportanceMatrix]:
        cfg = self.config
        shard = self.client_data(client_id)
        if len(shard) == 0:
            raise InputError(f"client {client_id} has no data")
        rng = client_rng(cfg.experiment.seed, round, client_id)
        importance = compute_importance(
            self.model, global_adapter, shard, mode=cfg.pruning.importance_mode, client_id=client_id, round=round
        )
        mask, sent_importance = self._mask_for(importance, round, client_id)

        adapter = global_adapter
        lr = cfg.training.learning_rate
        batch = cfg.training.batch_size
        for _ in range(cfg.training.local_epochs):
            order = rng.permutation(len(shard))
            for start in range(0, len(shard), batch):
                idx = order[start : start + batch]
                _, grads = self.model.loss_and_grad(adapter, shard.tokens[idx], shard.mask[idx], shard.labels[idx])
                adapter = adapter - freeze_pruned(grads, mask) * lr
        final_loss, _ = self.model.evaluate(adapter, shard)
        if not math.isfinite(final_loss):
            raise NumericalError(f"client {client_id} diverged in round {round}: loss {final_loss}")
        logger.debug(
            "client %d trained", client_id,
            extra={"fields": {"round": round, "client": client_id, "loss": final_loss, "kept_heads": mask.kept_count}},
        )
        update = ClientUpdate.from_delta(
            adapter - global_adapter,
            mask,
            sent_importance,
            client_id=client_id,
            round=round,
            sample_count=len(shard),
            loss=final_loss,
        )
        return update, importance

    def _train_clients(
        self, selected: Sequence[int], global_adapter: LoraAdapter, round: int
    ) -> list[tuple[ClientUpdate, ImportanceMatrix]]:
        workers = min(self.config.federation.threads, len(selected))
        if workers <= 1:
            results = [self._local_round(c, global_adapter, round) for c in selected]
        else:
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="fedpeft-client") as pool:
                futures = [pool.submit(self._local_round, c, global_adapter, round) for c in selected]
                results = [f.result() for f in futures]
        return sorted(results, key=lambda pair: pair[0].client_id)

    def select(self) -> list[int]:
        k = self.config.federation.clients_per_round
        if self.config.federation.selection == "loss":
            return select_top_k(self.ledger, k)
        return select_random(self._selection_rng, self.ledger.n_clients, k)

    def run_round(self) -> RoundMetrics:
        cfg = self.config
        round = self.state.round + 1
        if round > cfg.experiment.rounds:
            raise InputError(f"all {cfg.experiment.rounds} rounds already ran")
        started = time.perf_counter()
        selected = self.select()
        trained = self._train_clients(selected, self.state.adapter, round)
        updates = [u for u, _ in trained]
        scores = {u.client_id: importance.scores for u, importance in trained}
        payloads = {u.client_id: encode_update(u) for u in updates}
        if cfg.aggregation.wire_roundtrip:
            updates = [decode_update(payloads[u.client_id]) for u in updates]
        self.state = aggregate(self.state, updates, cfg.aggregation.mode)
        for u in updates:
            self.ledger.record(u.client_id, u.loss, round)
        val_loss, accuracy = self.model.evaluate(self.state.adapter, self.val_set)
        if not math.isfinite(val_loss):
            raise NumericalError(f"global validation loss is {val_loss} after round {round}")
        self.ledger.set_global_loss(val_loss)

        importance_mean = np.mean([scores[u.client_id] for u in updates], axis=0)
        shift = None
        if self.history and self.history[-1].importance_mean:
            shift = float(np.linalg.norm(importance_mean - np.asarray(self.history[-1].importance_mean)))
        samples_seen = cfg.training.local_epochs
        clients = tuple(
            ClientReport(
                client_id=u.client_id,
                loss=u.loss,
                sample_count=u.sample_count,
                bytes=len(payloads[u.client_id]),
                ops=training_ops(self.arch, PeftMethod.LORA, u.mask.sparsity, samples_seen * u.sample_count),
                kept_heads=u.mask.kept_count,
                importance=_as_rows(u.importance),
                scores=_as_rows(scores[u.client_id]),
            )
            for u in updates
        )
        metrics = RoundMetrics(
            round=round,
            selected=tuple(selected),
            accuracy=accuracy,
            loss=val_loss,
            clients=clients,
            importance_distance=mean_pairwise_distance([u.importance for u in updates]),
            importance_mean=_as_rows(importance_mean),
            importance_shift=shift,
            wall_time=time.perf_counter() - started,
        )
        self.history.append(metrics)
        logger.info(
            "round %d: acc=%.4f loss=%.4f selected=%s bytes=%d",
            round, accuracy, val_loss, list(selected), metrics.bytes_total,
            extra={"fields": {"round": round, "accuracy": accuracy, "loss": val_loss, "selected": list(selected)}},
        )
        return metrics

    def run(self, on_round: Callable[[RoundMetrics], None] | None = None) -> list[RoundMetrics]:
        while self.state.round < self.config.experiment.rounds:
            metrics = self.run_round()
            if on_round is not None:
                on_round(metrics)
        return self.history

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            round=self.state.round,
            seed=self.config.experiment.seed,
            model_config=self.config.model,
            adapter=self.state.adapter,
            experiment=self.config.to_dict(),
        )


class MetricsWriter:
    """Appends one JSON line per round to ``metrics.jsonl``, flushing each time."""

    def __init__(self, run_dir: str | Path):
        self.path = Path(run_dir) / "metrics.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")

    def append(self, metrics: RoundMetrics) -> None:
        self._fh.write(json.dumps(metrics.to_record(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_summary_csv(metrics: Sequence[RoundMetrics], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for m in metrics:
            writer.writerow(
                [m.round, repr(m.accuracy), repr(m.loss), m.bytes_total, repr(m.ops_total), " ".join(map(str, m.selected))]
            )
    return path


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_experiment(
    config: ExperimentConfig,
    run_dir: str | Path | None = None,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> ExperimentResult:
    """Run every round of ``config``; with ``run_dir`` also write metrics, summary and checkpoints.

    Metrics written before a failure stay on disk; the error is re-raised.
    """
    sim = FederatedSimulation(config)
    run_path = Path(run_dir) if run_dir is not None else None
    writer = MetricsWriter(run_path) if run_path is not None else None
    manager = (
        CheckpointManager(run_path / "checkpoints", config.checkpoint.keep_count) if run_path is not None else None
    )
    every = config.checkpoint.every

    def after_round(metrics: RoundMetrics) -> None:
        if writer is not None:
            writer.append(metrics)
        if manager is not None and every and metrics.round % every == 0:
            manager.save(sim.checkpoint())
        if on_round is not None:
            on_round(metrics)

    try:
        sim.run(after_round)
    finally:
        if writer is not None:
            writer.close()
            write_summary_csv(sim.history, run_path / "summary.csv")
    final_path = manager.save(sim.checkpoint(), final=True) if manager is not None else None
    return ExperimentResult(
        config=config,
        metrics=list(sim.history),
        final_adapter=sim.state.adapter,
        initial_loss=sim.initial_loss,
        initial_accuracy=sim.initial_accuracy,
        convergence_round=convergence_round(sim.history, config.experiment.accuracy_threshold),
        run_dir=run_path,
        checkpoint_path=final_path,
    )
