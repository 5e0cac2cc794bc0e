"""Federated rounds end to end on the toy model."""

import dataclasses

import numpy as np
import pytest

from fedpeft import orchestrator
from fedpeft.checkpoint import read_checkpoint
from fedpeft.config import apply_overrides
from fedpeft.costs import PeftMethod, payload_bytes, training_ops
from fedpeft.errors import InputError, NumericalError
from fedpeft.importance import random_prune_mask
from fedpeft.lora import LoraAdapter, freeze_pruned, head_rows
from fedpeft.orchestrator import (
    FederatedSimulation,
    RoundMetrics,
    client_rng,
    convergence_round,
    pruning_rng,
    read_metrics,
    run_experiment,
    seed_stream,
)


def configured(config, **overrides):
    return apply_overrides(config, {key.replace("__", "."): value for key, value in overrides.items()})


class TestLocalTraining:
    def test_heavy_pruning_trains_one_head(self, fast_config):
        """At sparsity 0.9 of 8 heads only one head's B blocks move."""
        sim = FederatedSimulation(configured(fast_config, pruning__mode="importance", pruning__sparsity=0.9))
        update = sim.local_train(0, sim.state.adapter, round=1)
        assert len(update.delta_b) == 1
        (layer, head), = update.delta_b
        dense = update.to_dense_b()
        rows = head_rows(32, 4, head)
        assert np.abs(dense[layer, :, rows]).max() > 0
        dense[layer, :, rows] = 0.0
        assert not dense.any()
        assert update.importance[~update.mask.keep].sum() == 0.0

    def test_zero_epochs_sends_zero_deltas(self, fast_config):
        sim = FederatedSimulation(configured(fast_config, training__local_epochs=0))
        update = sim.local_train(1, sim.state.adapter, round=1)
        assert not update.delta_a.any() and not update.delta_head.any()
        assert not any(block.any() for block in update.delta_b.values())
        assert np.all(update.importance > 0)
        assert np.isfinite(update.loss)

    def test_deterministic(self, fast_config):
        config = configured(fast_config, pruning__mode="random", pruning__sparsity=0.5)
        first = FederatedSimulation(config).local_train(2, FederatedSimulation(config).state.adapter, round=3)
        sim = FederatedSimulation(config)
        assert sim.local_train(2, sim.state.adapter, round=3) == first

    def test_client_streams_differ(self):
        assert client_rng(0, 1, 0).random() != client_rng(0, 1, 1).random()
        assert client_rng(0, 1, 0).random() == client_rng(0, 1, 0).random()


    def test_random_mask_has_its_own_stream(self, fast_config):
        """Random pruning draws its mask apart from the batch order unpruned training uses."""
        config = configured(fast_config, pruning__mode="random", pruning__sparsity=0.5, training__local_epochs=1)
        sim = FederatedSimulation(config)
        start = sim.state.adapter
        update = sim.local_train(1, start, round=2)
        assert update.mask == random_prune_mask(2, 4, 0.5, pruning_rng(0, 2, 1))
        shard = sim.client_data(1)
        order = client_rng(0, 2, 1).permutation(len(shard))
        batch, lr = config.training.batch_size, config.training.learning_rate
        local = start
        for begin in range(0, len(shard), batch):
            idx = order[begin : begin + batch]
            _, grads = sim.model.loss_and_grad(local, shard.tokens[idx], shard.mask[idx], shard.labels[idx])
            local = local - freeze_pruned(grads, update.mask) * lr
        np.testing.assert_allclose(update.delta_a, (local - start).a, atol=1e-12)
        np.testing.assert_allclose(update.delta_head, (local - start).head, atol=1e-12)

class TestRounds:
    def test_loss_selection_starts_with_lowest_ids(self, fast_config):
        sim = FederatedSimulation(configured(fast_config, federation__selection="loss"))
        assert sim.run_round().selected == (0, 1)
        assert sim.run_round().selected == (2, 3)

    def test_single_client_weighted_merge(self, fast_config):
        """One client: A moves by its delta, each B block by alpha/(alpha+eps) of it."""
        config = configured(
            fast_config, federation__selection="loss", federation__clients_per_round=1, aggregation__mode="weighted"
        )
        sim = FederatedSimulation(config)
        start = sim.state.adapter
        update = sim.local_train(0, start, round=1)
        sim.run_round()
        merged = sim.state.adapter
        np.testing.assert_allclose(merged.a, start.a + update.delta_a, atol=1e-12)
        eps = config.aggregation.epsilon
        for (layer, head), block in update.delta_b.items():
            alpha = update.importance[layer, head]
            rows = head_rows(32, 4, head)
            np.testing.assert_allclose(
                merged.b[layer, :, rows], start.b[layer, :, rows] + block * alpha / (alpha + eps), atol=1e-12
            )

    def test_fedavg_matches_reference_loop(self, fast_config):
        """Five rounds of plain FedAvg agree with a hand-written client loop."""
        config = configured(fast_config, experiment__rounds=5, aggregation__mode="fedavg")
        sim = FederatedSimulation(config)
        current = sim.state.adapter
        sim.run()
        lr, batch = config.training.learning_rate, config.training.batch_size
        for metrics in sim.history:
            deltas, counts = [], []
            for client in metrics.selected:
                shard = sim.client_data(client)
                rng = client_rng(config.experiment.seed, metrics.round, client)
                local = current
                order = rng.permutation(len(shard))
                for start in range(0, len(shard), batch):
                    idx = order[start : start + batch]
                    _, grads = sim.model.loss_and_grad(local, shard.tokens[idx], shard.mask[idx], shard.labels[idx])
                    local = local - grads * lr
                deltas.append(local - current)
                counts.append(len(shard))
            total = float(sum(counts))
            step = LoraAdapter(
                sum(n * d.a for n, d in zip(counts, deltas)) / total,
                sum(n * d.b for n, d in zip(counts, deltas)) / total,
                sum(n * d.head for n, d in zip(counts, deltas)) / total,
            )
            current = current + step
        np.testing.assert_allclose(sim.state.adapter.a, current.a, atol=1e-12)
        np.testing.assert_allclose(sim.state.adapter.b, current.b, atol=1e-12)
        np.testing.assert_allclose(sim.state.adapter.head, current.head, atol=1e-12)

    def test_bytes_and_ops_accounting(self, fast_config):
        config = configured(fast_config, pruning__mode="importance", pruning__sparsity=0.5)
        sim = FederatedSimulation(config)
        metrics = sim.run_round()
        for client in metrics.clients:
            assert client.bytes == payload_bytes(sim.arch, 0.5)
            assert client.kept_heads == 4
            assert client.ops == training_ops(sim.arch, PeftMethod.LORA, 0.5, client.sample_count)
        assert metrics.bytes_total == 2 * payload_bytes(sim.arch, 0.5)

    def test_pruning_reduces_bytes(self, fast_config):
        dense = FederatedSimulation(fast_config).run_round()
        pruned = FederatedSimulation(configured(fast_config, pruning__mode="random", pruning__sparsity=0.5)).run_round()
        assert pruned.bytes_total < dense.bytes_total

    def test_wire_round_trip_mode_runs(self, fast_config):
        sim = FederatedSimulation(configured(fast_config, aggregation__wire_roundtrip=True, aggregation__mode="weighted"))
        metrics = sim.run_round()
        assert 0.0 <= metrics.accuracy <= 1.0

    def test_dirichlet_partition(self, fast_config):
        sim = FederatedSimulation(configured(fast_config, data__partition="dirichlet", data__dirichlet_alpha=0.3))
        assert sim.partition.covers(64) and min(sim.partition.sizes()) >= 1
        sim.run()
        assert len(sim.history) == 2

    def test_importance_evolution(self, fast_config):
        """Each round records the mean raw head scores and how far they moved since the last round."""
        sim = FederatedSimulation(fast_config)
        first, second = sim.run_round(), sim.run_round()
        for metrics in (first, second):
            assert np.shape(metrics.importance_mean) == (2, 4)
            expected = np.mean([client.scores for client in metrics.clients], axis=0)
            np.testing.assert_allclose(metrics.importance_mean, expected, atol=1e-15)
        assert first.importance_shift is None
        moved = np.linalg.norm(np.subtract(second.importance_mean, first.importance_mean))
        assert second.importance_shift == pytest.approx(moved)

    def test_raw_scores_cover_pruned_heads(self, fast_config):
        sim = FederatedSimulation(configured(fast_config, pruning__mode="importance", pruning__sparsity=0.5))
        for client in sim.run_round().clients:
            scores, sent = np.asarray(client.scores), np.asarray(client.importance)
            assert np.all(scores > 0) and (sent == 0).sum() == 4
            np.testing.assert_array_equal(sent[sent > 0], scores[sent > 0])

    def test_no_round_past_the_budget(self, fast_config):
        sim = FederatedSimulation(fast_config)
        sim.run()
        with pytest.raises(InputError):
            sim.run_round()


class TestRunExperiment:
    def test_threads_do_not_change_results(self, fast_config):
        serial = run_experiment(fast_config)
        threaded = run_experiment(configured(fast_config, federation__threads=3))
        assert [m.to_record() for m in serial.metrics] == [m.to_record() for m in threaded.metrics]

    def test_reruns_are_byte_identical(self, fast_config, tmp_path):
        config = configured(fast_config, pruning__mode="importance", pruning__sparsity=0.5, aggregation__mode="weighted")
        run_experiment(config, tmp_path / "a")
        run_experiment(config, tmp_path / "b")
        for name in ("metrics.jsonl", "summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_zero_rounds(self, fast_config, temp_run_dir):
        config = configured(fast_config, experiment__rounds=0)
        result = run_experiment(config, temp_run_dir)
        assert result.metrics == [] and result.final_accuracy == result.initial_accuracy
        assert read_metrics(temp_run_dir / "metrics.jsonl") == []
        checkpoint = read_checkpoint(result.checkpoint_path)
        initial = LoraAdapter.initialize(config.model, np.random.default_rng(seed_stream(0, orchestrator.STREAM_ADAPTER)))
        assert checkpoint.round == 0
        np.testing.assert_array_equal(checkpoint.adapter.a, initial.a)

    def test_outputs_written(self, fast_config, temp_run_dir):
        config = configured(fast_config, checkpoint__every=1)
        result = run_experiment(config, temp_run_dir)
        records = read_metrics(temp_run_dir / "metrics.jsonl")
        assert [r["round"] for r in records] == [1, 2]
        assert records[0]["bytes"] == result.metrics[0].bytes_total
        assert records[0]["importance_shift"] is None
        assert records[1]["importance_shift"] == result.metrics[1].importance_shift
        assert records[1]["importance_mean"] == [list(row) for row in result.metrics[1].importance_mean]
        summary = (temp_run_dir / "summary.csv").read_text(encoding="utf-8").splitlines()
        assert summary[0] == "round,accuracy,loss,bytes,ops,selected" and len(summary) == 3
        names = sorted(p.name for p in (temp_run_dir / "checkpoints").iterdir())
        assert names == ["checkpoint-1.json", "checkpoint-2.json", "final.json"]
        np.testing.assert_array_equal(read_checkpoint(result.checkpoint_path).adapter.b, result.final_adapter.b)

    def test_divergence_keeps_earlier_metrics(self, fast_config, temp_run_dir, monkeypatch):
        real = orchestrator.aggregate

        def poisoned(state, updates, mode="weighted"):
            merged = real(state, updates, mode)
            if merged.round == 2:
                return dataclasses.replace(merged, adapter=merged.adapter * float("nan"))
            return merged

        monkeypatch.setattr(orchestrator, "aggregate", poisoned)
        with pytest.raises(NumericalError):
            run_experiment(fast_config, temp_run_dir)
        assert [r["round"] for r in read_metrics(temp_run_dir / "metrics.jsonl")] == [1]
        assert len((temp_run_dir / "summary.csv").read_text(encoding="utf-8").splitlines()) == 2

    def test_callback_sees_every_round(self, fast_config):
        seen = []
        run_experiment(fast_config, on_round=lambda m: seen.append(m.round))
        assert seen == [1, 2]


def make_metrics(round, accuracy):
    return RoundMetrics(round=round, selected=(0,), accuracy=accuracy, loss=1.0, clients=(), importance_distance=0.0)


def test_convergence_round():
    history = [make_metrics(1, 0.4), make_metrics(2, 0.85), make_metrics(3, 0.7)]
    assert convergence_round(history, 0.8) == 2
    assert convergence_round(history, 0.9) is None


def test_wall_time_not_compared():
    assert dataclasses.replace(make_metrics(1, 0.5), wall_time=3.0) == make_metrics(1, 0.5)
