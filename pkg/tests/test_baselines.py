import numpy as np
import pytest

from protocil.baselines import (
    LinearHead,
    NmeHead,
    fit_nme,
    predict_linear,
    predict_linear_batch,
    predict_nme,
    predict_nme_batch,
    train_linear,
)
from protocil.errors import ConfigError
from protocil.ipc import PrototypeClassifier, TrainConfig, train_phase


class TestPredictLinear:
    def test_one_hot_rows(self):
        head = LinearHead(np.eye(4), np.zeros(4))
        assert predict_linear(head, np.eye(4)[2]) == 2

    def test_collinear_cosine_ignores_magnitude(self):
        w = np.random.default_rng(0).standard_normal((5, 6))
        head = LinearHead(w, np.zeros(5), normalized=True)
        z = 7.3 * w[3]
        assert predict_linear(head, z) == 3
        assert predict_linear(head, 0.01 * w[3]) == 3

    def test_against_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for normalized in (False, True):
            head = LinearHead(
                rng.standard_normal((7, 5)), rng.standard_normal(7), normalized
            )
            z = rng.standard_normal((1000, 5))
            got = predict_linear_batch(head, z)
            for i in range(1000):
                best, best_s = 0, -np.inf
                for k in range(7):
                    if normalized:
                        s = float(head.weights[k] @ z[i]) / (
                            np.linalg.norm(head.weights[k]) * np.linalg.norm(z[i])
                        )
                    else:
                        s = float(head.weights[k] @ z[i]) + head.biases[k]
                    if s > best_s:
                        best, best_s = k, s
                assert got[i] == best

    def test_tie_to_lowest_id(self):
        head = LinearHead(np.zeros((3, 2)), np.array([1.0, 5.0, 5.0]))
        assert predict_linear(head, np.zeros(2)) == 1

    def test_dimension_mismatch(self):
        head = LinearHead(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ConfigError):
            predict_linear(head, np.zeros(4))


class TestTrainLinear:
    def test_separable_two_class(self):
        rng = np.random.default_rng(2)
        z = np.vstack([
            rng.standard_normal((40, 4)) + [6, 0, 0, 0],
            rng.standard_normal((40, 4)) - [6, 0, 0, 0],
        ])
        y = np.repeat([0, 1], 40)
        head = train_linear(
            LinearHead.empty(4).grown(2), z, y, TrainConfig(epochs=60)
        )
        assert float(np.mean(predict_linear_batch(head, z) == y)) == 1.0

    def test_cosine_scale_invariance_after_training(self):
        rng = np.random.default_rng(3)
        z = np.vstack([
            rng.standard_normal((30, 4)) + [5, 0, 0, 0],
            rng.standard_normal((30, 4)) + [0, 5, 0, 0],
        ])
        y = np.repeat([0, 1], 30)
        head = train_linear(
            LinearHead.empty(4, normalized=True).grown(2), z, y,
            TrainConfig(epochs=40),
        )
        scaled = LinearHead(head.weights * 10.0, head.biases, normalized=True)
        probe = rng.standard_normal((200, 4))
        assert np.array_equal(
            predict_linear_batch(head, probe), predict_linear_batch(scaled, probe)
        )

    def test_cosine_rows_unit_norm_after_training(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal((50, 3)) + np.eye(3)[np.arange(50) % 3] * 4
        y = np.arange(50) % 3
        head = train_linear(
            LinearHead.empty(3, normalized=True).grown(3), z, y,
            TrainConfig(epochs=10),
        )
        assert np.allclose(np.linalg.norm(head.weights, axis=1), 1.0, atol=1e-12)

    def test_phase_two_collapse_vs_ipc(self):
        # the distortion the frozen-prototype design avoids: without replay a
        # linear head crushes the scores of phase-1 classes
        rng = np.random.default_rng(5)
        raw = rng.standard_normal((4, 16))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True) * 6.0
        labels = np.repeat(np.arange(4), 60)
        feats = means[labels] + rng.standard_normal((240, 16))
        hold = means[labels] + rng.standard_normal((240, 16))
        first = labels < 2
        cfg = TrainConfig(epochs=80)

        head = train_linear(LinearHead.empty(16).grown(2), feats[first],
                            labels[first], cfg)
        head = train_linear(head.grown(2), feats[~first], labels[~first], cfg)
        old_mask = labels < 2
        linear_old_acc = float(np.mean(
            predict_linear_batch(head, hold[old_mask]) == labels[old_mask]
        ))

        clf = train_phase(PrototypeClassifier.empty(16), feats[first],
                          labels[first], [0, 1], cfg)
        clf = train_phase(clf, feats[~first], labels[~first], [2, 3], cfg)
        ipc_acc = float(np.mean(clf.predict_batch(hold) == labels))

        assert linear_old_acc < 0.5
        assert ipc_acc > 0.9

    def test_label_out_of_range(self):
        head = LinearHead.empty(3).grown(2)
        with pytest.raises(ConfigError, match="label"):
            train_linear(head, np.zeros((2, 3)), np.array([0, 2]),
                         TrainConfig(epochs=1))

    def test_grown_rows_linear_zero_cosine_unit(self):
        lin = LinearHead.empty(4).grown(3)
        assert np.array_equal(lin.weights, np.zeros((3, 4)))
        cos = LinearHead.empty(4, normalized=True).grown(3, seed=1)
        assert np.allclose(np.linalg.norm(cos.weights, axis=1), 1.0)
        again = LinearHead.empty(4, normalized=True).grown(3, seed=1)
        assert np.array_equal(cos.weights, again.weights)


class TestNme:
    def test_simple_mean(self):
        head = fit_nme(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([0, 0]), 1)
        assert head.class_means[0].tolist() == [1.0, 1.0]
        assert head.counts.tolist() == [2]

    def test_prediction_nearest_mean(self):
        head = NmeHead(np.array([[0.0, 0.0], [4.0, 0.0]]), np.array([3, 3]))
        assert predict_nme(head, np.array([1.0, 0.0])) == 0
        assert predict_nme(head, np.array([3.0, 0.0])) == 1
        assert predict_nme(head, np.array([2.0, 0.0])) == 0  # tie to lowest

    def test_exemplar_only_means(self):
        rng = np.random.default_rng(6)
        exemplars = rng.standard_normal((5, 3))
        bulk = rng.standard_normal((50, 3)) + 9
        feats = np.vstack([exemplars, bulk])
        labels = np.array([0] * 5 + [1] * 50)
        head = fit_nme(feats, labels, 2)
        assert np.allclose(head.class_means[0], exemplars.mean(axis=0))
        assert head.counts.tolist() == [5, 50]

    def test_rejects_empty_class(self):
        with pytest.raises(ConfigError, match="class 1"):
            fit_nme(np.zeros((2, 2)), np.array([0, 0]), 2)

    def test_pure_pl_ipc_matches_nme(self):
        # both estimate class means independently; predictions must agree
        rng = np.random.default_rng(7)
        means = 6.0 * np.eye(4)[:3]
        labels = np.repeat(np.arange(3), 40)
        feats = means[labels] + rng.standard_normal((120, 4))
        clf = train_phase(
            PrototypeClassifier.empty(4, 1.0, 1.0), feats, labels,
            [0, 1, 2], TrainConfig(), pl_only=True,
        )
        nme = fit_nme(feats, labels, 3)
        assert np.abs(clf.prototypes - nme.class_means).max() <= 1e-4
        probe = means[labels] + rng.standard_normal((120, 4))
        assert np.array_equal(
            clf.predict_batch(probe), predict_nme_batch(nme, probe)
        )

    def test_nme_equals_ipc_at_class_means(self):
        rng = np.random.default_rng(8)
        means = rng.standard_normal((5, 6)) * 3
        clf = PrototypeClassifier(means)
        head = NmeHead(means, np.ones(5, dtype=int))
        probe = rng.standard_normal((300, 6))
        assert np.array_equal(clf.predict_batch(probe), predict_nme_batch(head, probe))


class TestPrototypeLinearCorrespondence:
    def test_doubled_prototype_weights_reproduce_decision_rule(self):
        # score 2*p.z - p.p differs from the discriminant only by the
        # class-independent -z.z term, so the argmax agrees everywhere
        rng = np.random.default_rng(9)
        protos = rng.standard_normal((6, 5)) * 2
        clf = PrototypeClassifier(protos)
        head = LinearHead(2.0 * protos, -np.sum(protos * protos, axis=1))
        probe = rng.standard_normal((500, 5)) * 3
        assert np.array_equal(
            clf.predict_batch(probe), predict_linear_batch(head, probe)
        )

    def test_cosine_weight_row_rescaling_argmax_invariance(self):
        rng = np.random.default_rng(10)
        w = rng.standard_normal((4, 5))
        head = LinearHead(w, np.zeros(4), normalized=True)
        scales = np.array([0.2, 5.0, 1.0, 42.0])
        scaled = LinearHead(w * scales[:, None], np.zeros(4), normalized=True)
        probe = rng.standard_normal((300, 5))
        assert np.array_equal(
            predict_linear_batch(head, probe), predict_linear_batch(scaled, probe)
        )
