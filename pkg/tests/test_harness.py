import json

import numpy as np
import pytest

from conftest import hetero_clusters
from protocil.errors import ConfigError
from protocil.featureset import SynthSpec, generate_synthetic, split_tasks
from protocil.harness import (
    ExemplarMemory,
    IpcAdapter,
    average_accuracy,
    herding_select,
    run_cil,
    stratified_eval_split,
)
from protocil.ipc import TrainConfig


def brute_force_herding(feats, budget):
    """Reference greedy selection, recomputing candidate means from scratch."""
    n = feats.shape[0]
    target = feats.mean(axis=0)
    chosen = []
    for _ in range(min(budget, n)):
        best, best_cost = None, None
        for i in range(n):
            if i in chosen:
                continue
            mean = np.mean([feats[j] for j in chosen + [i]], axis=0)
            cost = float(np.linalg.norm(target - mean) ** 2)
            if best_cost is None or cost < best_cost:
                best, best_cost = i, cost
        chosen.append(best)
    return np.array(chosen)


class TestHerding:
    def test_budget_one_is_nearest_to_mean(self):
        feats = np.random.default_rng(0).standard_normal((15, 4))
        nearest = int(np.argmin(((feats - feats.mean(axis=0)) ** 2).sum(axis=1)))
        assert herding_select(feats, 1).tolist() == [nearest]

    def test_budget_exceeding_class_returns_all(self):
        feats = np.random.default_rng(1).standard_normal((6, 3))
        sel = herding_select(feats, 50)
        assert sorted(sel.tolist()) == list(range(6))
        assert np.array_equal(sel, brute_force_herding(feats, 50))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(3, 25))
            feats = rng.standard_normal((n, int(rng.integers(2, 6))))
            budget = int(rng.integers(1, n + 2))
            assert np.array_equal(
                herding_select(feats, budget), brute_force_herding(feats, budget)
            )

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            herding_select(np.zeros((0, 3)), 2)

    def test_tie_to_lowest_index(self):
        feats = np.array([[1.0, 0.0], [1.0, 0.0], [-2.0, 0.0]])
        assert herding_select(feats, 1)[0] == 0


class TestAverageAccuracy:
    def test_mean_of_two(self):
        assert average_accuracy([1.0, 0.5]) == 0.75

    def test_single(self):
        assert average_accuracy([0.82]) == 0.82


class TestExemplarMemory:
    def test_caps_at_budget_in_herding_order(self):
        feats = np.random.default_rng(3).standard_normal((10, 4))
        mem = ExemplarMemory(4)
        mem.remember(2, np.arange(100, 110), feats)
        stored = mem.indices_for(2)
        assert stored.size == 4
        expect = np.arange(100, 110)[herding_select(feats, 4)]
        assert np.array_equal(stored, expect)

    def test_zero_budget_stores_nothing(self):
        mem = ExemplarMemory(0)
        mem.remember(0, np.arange(5), np.ones((5, 2)))
        assert mem.all_indices().size == 0


class PerfectStub:
    """Cheating classifier: memorizes the true label of every feature vector
    it will ever be asked about (keyed by value). Plumbing check only."""

    method_name = "stub"

    def __init__(self, fs, row_of_class):
        self._table = {
            fs.features[i].tobytes(): row_of_class[int(fs.labels[i])]
            for i in range(fs.n_samples)
        }
        self.trained_feature_keys = []

    def train_on_phase(self, feats, row_labels, new_row_count, cfg):
        self.trained_feature_keys.append({f.tobytes() for f in feats})

    def predict_rows(self, feats):
        return np.array([self._table[f.tobytes()] for f in feats])


def tiny_stream(classes=8, per_class=10, dim=4, phases=2, seed=1, replay=0):
    fs = generate_synthetic(
        SynthSpec(classes, dim, per_class, mean_scale=6.0, within_std=0.5, seed=seed)
    )
    return fs, split_tasks(fs, phases, 0.5, memory_per_class=replay)


class TestRunCil:
    def test_perfect_stub_scores_one(self):
        fs, stream = tiny_stream()
        stub = PerfectStub(fs, {c: c for c in range(fs.class_count)})
        report = run_cil(fs, stream, stub, train_cfg=TrainConfig(epochs=1), seed=0)
        assert all(p.accuracy == 1.0 for p in report.phases)
        assert report.average_accuracy == 1.0
        assert report.method == "stub"

    def test_report_shape_and_mean_invariant(self):
        fs, stream = tiny_stream(phases=2)
        report = run_cil(fs, stream, "nme", train_cfg=TrainConfig(epochs=1), seed=3)
        assert len(report.phases) == 3  # base + T
        mean = sum(p.accuracy for p in report.phases) / len(report.phases)
        assert abs(report.average_accuracy - mean) <= 1e-12
        assert report.phases[0].old_accuracy is None
        for p in report.phases[1:]:
            assert 0.0 <= p.old_accuracy <= 1.0
        assert report.config_echo["class_count"] == 8
        assert report.version

    def test_eval_never_trains(self):
        fs, stream = tiny_stream(per_class=12)
        stub = PerfectStub(fs, {c: c for c in range(fs.class_count)})
        run_cil(fs, stream, stub, train_cfg=TrainConfig(epochs=1), seed=5)
        _, eval_mask = stratified_eval_split(fs, 0.2, 5)
        eval_keys = {fs.features[i].tobytes() for i in np.flatnonzero(eval_mask)}
        for trained in stub.trained_feature_keys:
            assert not (trained & eval_keys)

    def test_memory_counts(self):
        fs, stream = tiny_stream(replay=3)
        rng_probe = []

        class SpyStub(PerfectStub):
            def train_on_phase(self, feats, row_labels, new_row_count, cfg):
                rng_probe.append(np.bincount(row_labels, minlength=8))
                super().train_on_phase(feats, row_labels, new_row_count, cfg)

        stub = SpyStub(fs, {c: c for c in range(fs.class_count)})
        run_cil(fs, stream, stub, train_cfg=TrainConfig(epochs=1), seed=7)
        # phase 1 training batch carries exactly 3 exemplars per base class
        counts = rng_probe[1]
        for c in stream.phases[0].classes:
            assert counts[c] == 3

    def test_no_memory_when_r_zero(self):
        fs, stream = tiny_stream(replay=0)
        seen = []

        class SpyStub(PerfectStub):
            def train_on_phase(self, feats, row_labels, new_row_count, cfg):
                seen.append(sorted(set(row_labels.tolist())))

        run_cil(fs, stream, SpyStub(fs, {c: c for c in range(fs.class_count)}),
                train_cfg=TrainConfig(epochs=1), seed=7)
        assert seen[1] == [4, 5]  # only the new classes, no replay rows

    def test_replay_override(self):
        fs, stream = tiny_stream(replay=0)
        seen = []

        class SpyStub(PerfectStub):
            def train_on_phase(self, feats, row_labels, new_row_count, cfg):
                seen.append(sorted(set(row_labels.tolist())))

        run_cil(fs, stream, SpyStub(fs, {c: c for c in range(fs.class_count)}),
                train_cfg=TrainConfig(epochs=1), seed=7, memory_per_class=2)
        assert seen[1] == [0, 1, 2, 3, 4, 5]  # base rows replayed too

    def test_deterministic_bytes_in_process(self, cil_fixture):
        fs, _ = cil_fixture
        stream = split_tasks(fs, 2, 0.5)
        cfg = TrainConfig(epochs=5)
        a = run_cil(fs, stream, "ipc", train_cfg=cfg, seed=11).to_json_bytes()
        b = run_cil(fs, stream, "ipc", train_cfg=cfg, seed=11).to_json_bytes()
        assert a == b
        doc = json.loads(a)
        assert doc["method"] == "ipc"
        assert {"t", "classes", "A_t", "old_acc", "new_acc"} <= set(doc["phases"][0])

    def test_ipc_prototypes_constant_across_phases(self):
        fs, stream = tiny_stream(classes=8, phases=2, per_class=14)
        adapter = IpcAdapter(fs.dim, 1.0, 0.3)
        snapshots = []

        original = adapter.train_on_phase

        def spy(feats, row_labels, new_row_count, cfg):
            original(feats, row_labels, new_row_count, cfg)
            snapshots.append(np.array(adapter.clf.prototypes))

        adapter.train_on_phase = spy
        run_cil(fs, stream, adapter, train_cfg=TrainConfig(epochs=8), seed=2)
        for earlier, later in zip(snapshots, snapshots[1:]):
            assert np.array_equal(later[: earlier.shape[0]], earlier)

    def test_mismatched_stream_rejected_before_training(self):
        fs_a, stream_a = tiny_stream()
        fs_b = generate_synthetic(SynthSpec(4, 4, 10, seed=2))
        calls = []

        class SpyStub(PerfectStub):
            def train_on_phase(self, *a, **k):
                calls.append(1)

        with pytest.raises(ConfigError, match="stream built for"):
            run_cil(fs_b, stream_a, SpyStub(fs_a, {c: c for c in range(8)}),
                    train_cfg=TrainConfig(epochs=1))
        assert not calls

    def test_unknown_method(self):
        fs, stream = tiny_stream()
        with pytest.raises(ConfigError, match="unknown method"):
            run_cil(fs, stream, "svm", train_cfg=TrainConfig(epochs=1))

    def test_shuffled_class_order_maps_back_to_original_ids(self):
        fs = generate_synthetic(
            SynthSpec(6, 4, 10, mean_scale=8.0, within_std=0.3, seed=4)
        )
        stream = split_tasks(fs, 3, 0.5, seed=9)
        report = run_cil(fs, stream, "nme", train_cfg=TrainConfig(epochs=1), seed=0)
        assert [p.classes for p in report.phases] == [
            p.classes for p in stream.phases
        ]
        assert report.average_accuracy > 0.95  # separated synthetic clusters

    def test_normalize_features_flag(self):
        fs, stream = tiny_stream()
        a = run_cil(fs, stream, "nme", train_cfg=TrainConfig(epochs=1), seed=0)
        b = run_cil(fs, stream, "nme", train_cfg=TrainConfig(epochs=1), seed=0,
                    normalize_features=True)
        assert a.config_echo["normalize_features"] is False
        assert b.config_echo["normalize_features"] is True


class TestEvalSplit:
    def test_disjoint_and_stratified(self):
        fs = generate_synthetic(SynthSpec(5, 3, 20, seed=6))
        train_mask, eval_mask = stratified_eval_split(fs, 0.2, 3)
        assert not np.any(train_mask & eval_mask)
        assert np.all(train_mask | eval_mask)
        for c in range(5):
            idx = fs.class_indices(c)
            assert eval_mask[idx].sum() == 4  # 20% of 20

    def test_rejects_single_sample_class(self, tmp_path):
        from protocil.featureset import FeatureSet

        fs = FeatureSet(np.random.default_rng(0).standard_normal((3, 2)),
                        np.array([0, 0, 1]), 2)
        with pytest.raises(ConfigError, match="class 1"):
            stratified_eval_split(fs, 0.2, 0)

    def test_seed_determinism(self):
        fs = generate_synthetic(SynthSpec(4, 3, 10, seed=8))
        a = stratified_eval_split(fs, 0.25, 42)
        b = stratified_eval_split(fs, 0.25, 42)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
