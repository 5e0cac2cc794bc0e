"""Synthetic task generation, client partitions and dataset files."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpeft.data import (
    Dataset,
    Partition,
    SyntheticTask,
    export_jsonl,
    generate,
    import_jsonl,
    make_splits,
    partition_dirichlet,
    partition_iid,
)
from fedpeft.errors import ConfigError, InputError, ShapeError


def contains(seq, motif):
    return any(np.array_equal(seq[i : i + motif.size], motif) for i in range(seq.size - motif.size + 1))


def dominant_shares(dataset, partition, n_classes=3):
    return [
        dataset.subset(shard).class_counts(n_classes).max() / shard.size for shard in partition.shards
    ]


class TestSyntheticTask:
    def test_balanced_labels(self, task):
        counts = generate(task, 300, seed=0).class_counts(3)
        assert counts.tolist() == [100, 100, 100]

    def test_majority_predictor_is_chance(self, task):
        counts = generate(task, 300, seed=1).class_counts(3)
        assert counts.max() / counts.sum() == pytest.approx(1 / 3, abs=0.01)

    def test_deterministic(self, task):
        assert generate(task, 50, seed=4).equals(generate(task, 50, seed=4))
        assert not generate(task, 50, seed=4).equals(generate(task, 50, seed=5))

    def test_sample_layout(self, task, dataset):
        """Class motif inside, EOS last, length in the class window, pads after."""
        for tokens, mask, label in zip(dataset.tokens, dataset.mask, dataset.labels):
            real = tokens[mask]
            assert real[-1] == task.eos_token
            assert np.all(tokens[~mask] == task.pad_token)
            low, high = task.length_window(int(label))
            assert low <= real.size - 1 <= high
            assert contains(real[:-1], task.motif(int(label)))
            for other in range(3):
                if other != label:
                    assert not contains(real[:-1], task.motif(other))

    def test_motifs_disjoint_from_noise(self, task):
        motifs = np.concatenate([task.motif(c) for c in range(3)])
        assert not set(motifs) & set(task.noise_tokens())
        assert task.eos_token not in motifs and task.pad_token not in task.noise_tokens()

    def test_vocabulary_too_small(self):
        with pytest.raises(ConfigError, match="model.vocab_size"):
            SyntheticTask(vocab_size=10)

    def test_sequences_must_fit(self):
        with pytest.raises(ConfigError, match="data.length_span"):
            SyntheticTask(max_len=9)
        with pytest.raises(ConfigError, match="data.length_span"):
            SyntheticTask(max_len=12, length_shift=2)

    def test_length_says_nothing_about_the_class_by_default(self, task):
        assert {task.length_window(c) for c in range(3)} == {(6, 9)}
        shifted = SyntheticTask(length_shift=2)
        assert [shifted.length_window(c) for c in range(3)] == [(6, 9), (8, 11), (10, 13)]

    def test_splits_independent_and_reproducible(self, task):
        train, val = make_splits(task, 40, 20, seed=7)
        again_train, again_val = make_splits(task, 40, 20, seed=7)
        assert train.equals(again_train) and val.equals(again_val)
        assert len(train) == 40 and len(val) == 20
        assert not train.subset(range(20)).equals(val)

    def test_dataset_is_read_only(self, dataset):
        with pytest.raises(ValueError):
            dataset.labels[0] = 2


class TestIidPartition:
    def test_single_client_gets_everything(self, dataset):
        partition = partition_iid(dataset, 1, seed=0)
        assert partition.sizes() == [60]

    def test_even_split(self, task):
        partition = partition_iid(generate(task, 100, seed=0), 10, seed=0)
        assert partition.sizes() == [10] * 10 and partition.covers(100)

    def test_class_mix_tracks_global_distribution(self, task):
        dataset = generate(task, 300, seed=2)
        partition = partition_iid(dataset, 10, seed=3)
        for shard in partition.shards:
            counts = dataset.subset(shard).class_counts(3)
            n = shard.size
            sigma = np.sqrt(n * (1 / 3) * (2 / 3))
            assert np.all(np.abs(counts - n / 3) <= 4 * sigma)

    def test_too_many_clients(self, dataset):
        with pytest.raises(InputError):
            partition_iid(dataset, 61, seed=0)


class TestDirichletPartition:
    def test_large_alpha_is_near_iid(self, task):
        dataset = generate(task, 3000, seed=0)
        partition = partition_dirichlet(dataset, 10, 1000.0, seed=1)
        global_dist = dataset.class_counts(3) / len(dataset)
        for shard in partition.shards:
            local = dataset.subset(shard).class_counts(3) / shard.size
            assert 0.5 * np.abs(local - global_dist).sum() < 0.1

    def test_small_alpha_concentrates_labels(self, task):
        dataset = generate(task, 300, seed=0)
        medians = [np.median(dominant_shares(dataset, partition_dirichlet(dataset, 10, 0.1, seed=s))) for s in range(100)]
        assert np.median(medians) > 0.6

    def test_skew_grows_as_alpha_shrinks(self, task):
        dataset = generate(task, 300, seed=0)

        def mean_share(alpha):
            return np.mean([np.mean(dominant_shares(dataset, partition_dirichlet(dataset, 10, alpha, seed=s))) for s in range(30)])

        assert mean_share(0.1) > mean_share(2.0)

    def test_deterministic(self, dataset):
        first = partition_dirichlet(dataset, 5, 0.5, seed=2)
        second = partition_dirichlet(dataset, 5, 0.5, seed=2)
        assert all(np.array_equal(a, b) for a, b in zip(first.shards, second.shards))

    @given(n_clients=st.integers(1, 20), alpha=st.floats(0.05, 50.0), seed=st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_always_a_partition_with_no_empty_shard(self, n_clients, alpha, seed):
        dataset = generate(SyntheticTask(), 40, seed=0)
        partition = partition_dirichlet(dataset, n_clients, alpha, seed)
        assert partition.n_clients == n_clients
        assert partition.covers(40)
        assert min(partition.sizes()) >= 1

    def test_invalid_alpha(self, dataset):
        with pytest.raises(InputError):
            partition_dirichlet(dataset, 3, 0.0, seed=0)


class TestPartition:
    def test_empty_shard_rejected(self):
        with pytest.raises(InputError):
            Partition((np.array([0, 1]), np.array([], dtype=np.int64)))

    def test_shards_sorted(self):
        assert Partition((np.array([3, 1]),)).shard(0).tolist() == [1, 3]


class TestJsonl:
    def test_round_trip(self, dataset, tmp_path):
        path = export_jsonl(dataset, tmp_path / "data" / "train.jsonl")
        assert import_jsonl(path).equals(dataset)

    def test_header_line(self, dataset, tmp_path):
        path = export_jsonl(dataset, tmp_path / "train.jsonl")
        first = path.read_text(encoding="utf-8").splitlines()[0]
        assert '"kind": "fedpeft-dataset"' in first and '"n_samples": 60' in first

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"kind": "other", "format_version": 1}\n', encoding="utf-8")
        with pytest.raises(InputError):
            import_jsonl(path)

    def test_sample_count_mismatch(self, dataset, tmp_path):
        path = export_jsonl(dataset, tmp_path / "train.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(InputError):
            import_jsonl(path)

    def test_too_long_record(self, tmp_path):
        path = tmp_path / "long.jsonl"
        path.write_text(
            '{"format_version": 1, "kind": "fedpeft-dataset", "max_len": 2, "pad_token": 0, "n_samples": 1}\n'
            '{"label": 0, "tokens": [2, 3, 1]}\n',
            encoding="utf-8",
        )
        with pytest.raises(InputError):
            import_jsonl(path)

    def test_dataset_shape_checks(self):
        with pytest.raises(ShapeError):
            Dataset(np.zeros((2, 3)), np.ones((2, 3)), np.zeros(3))
