import numpy as np
import pytest

from speechssl.probe import (
    LayerWeights,
    ascii_bar_chart,
    fit_layer_weights,
    layer_profile,
    loo_nearest_centroid_accuracy,
    speaker_separability,
    weighted_sum,
)


class TestWeightedSum:
    def test_one_hot_selects_layer(self):
        rng = np.random.default_rng(0)
        outputs = rng.standard_normal((4, 6, 3))
        weights = LayerWeights(np.array([0.0, 0.0, 50.0, 0.0]))
        got = weighted_sum(outputs, weights)
        assert np.max(np.abs(got - outputs[2])) < 1e-12

    def test_uniform_logits_uniform_weights(self):
        weights = LayerWeights(np.zeros(5))
        assert np.allclose(weights.weights, 0.2)
        assert abs(weights.weights.sum() - 1.0) < 1e-8

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(3)
        outputs = rng.standard_normal((3, 4, 5))
        weights = LayerWeights(rng.standard_normal(3))
        w = weights.weights
        oracle = np.zeros((4, 5))
        for layer in range(3):
            for t in range(4):
                for d in range(5):
                    oracle[t, d] += w[layer] * outputs[layer, t, d]
        assert np.max(np.abs(weighted_sum(outputs, weights) - oracle)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="weights"):
            weighted_sum(np.zeros((3, 2, 2)), LayerWeights(np.zeros(4)))


class TestLooNearestCentroid:
    def test_perfectly_separable(self):
        embeddings = np.array([
            [0.0, 0.0], [0.1, 0.0], [0.0, 0.1],
            [10.0, 10.0], [10.1, 10.0], [10.0, 10.1],
        ])
        classes = ["a", "a", "a", "b", "b", "b"]
        assert loo_nearest_centroid_accuracy(embeddings, classes) == 1.0

    def test_chance_level_on_noise(self):
        # i.i.d. noise with S speakers scores ~1/S on average
        s, per = 4, 12
        accs = []
        for seed in range(40):
            rng = np.random.default_rng(seed)
            embeddings = rng.standard_normal((s * per, 8))
            classes = [f"c{i % s}" for i in range(s * per)]
            accs.append(loo_nearest_centroid_accuracy(embeddings, classes))
        mean = np.mean(accs)
        se = np.std(accs) / np.sqrt(len(accs))
        assert abs(mean - 1.0 / s) < max(4 * se, 0.05)

    def test_matches_exhaustive_loop_oracle(self):
        rng = np.random.default_rng(9)
        embeddings = rng.standard_normal((10, 3))
        classes = ["a", "b", "a", "b", "a", "b", "a", "b", "a", "b"]
        names = sorted(set(classes))
        correct = 0
        for i in range(10):
            best, best_d = None, np.inf
            for name in names:
                members = [
                    embeddings[j] for j in range(10)
                    if classes[j] == name and j != i
                ]
                centroid = np.mean(members, axis=0)
                d = float(np.sum((embeddings[i] - centroid) ** 2))
                if d < best_d:
                    best, best_d = name, d
            correct += best == classes[i]
        assert loo_nearest_centroid_accuracy(embeddings, classes) == correct / 10

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="2 classes"):
            loo_nearest_centroid_accuracy(np.zeros((3, 2)), ["a", "a", "a"])

    def test_singleton_class_rejected(self):
        with pytest.raises(ValueError, match="fewer than 2"):
            loo_nearest_centroid_accuracy(np.zeros((3, 2)), ["a", "a", "b"])


class TestSpeakerSeparability:
    def test_runs_on_trained_checkpoint(self, small_setup):
        import dataclasses

        from speechssl.trainer import train

        config, corpus, labels = small_setup
        config = dataclasses.replace(config, steps=2)
        ckpt, _ = train(config, corpus, labels)
        score = speaker_separability(ckpt, corpus, layer=config.encoder.tap_layer)
        assert 0.0 <= score <= 1.0

    def test_requires_speaker_tags(self, small_setup):
        import dataclasses

        from speechssl.corpus import Utterance
        from speechssl.trainer import train

        config, corpus, labels = small_setup
        config = dataclasses.replace(config, steps=1)
        ckpt, _ = train(config, corpus, labels)
        untagged = [Utterance(u.id, u.waveform, None) for u in corpus]
        with pytest.raises(ValueError, match="speaker"):
            speaker_separability(ckpt, untagged, layer=0)


class TestFitLayerWeights:
    def planted_instance(self, planted_layer=1, layers=4, n=200, d=8, seed=0):
        rng = np.random.default_rng(seed)
        outputs = rng.standard_normal((layers, n, d))
        targets = (outputs[planted_layer, :, 0] > 0).astype(np.int64)
        return outputs, targets

    def test_weights_concentrate_on_planted_layer(self):
        outputs, targets = self.planted_instance(planted_layer=1)
        weights, accuracy = fit_layer_weights(outputs, targets, steps=400, lr=0.1, seed=0)
        assert weights.weights[1] > 0.5
        assert accuracy > 0.9

    def test_single_class_rejected(self):
        outputs, _ = self.planted_instance()
        with pytest.raises(ValueError, match="degenerate"):
            fit_layer_weights(outputs, np.zeros(200, dtype=np.int64))

    def test_zero_learning_rate_keeps_uniform(self):
        outputs, targets = self.planted_instance()
        weights, _ = fit_layer_weights(outputs, targets, steps=50, lr=0.0, seed=0)
        assert np.allclose(weights.weights, 0.25)

    def test_profile_invariant_to_example_order(self):
        outputs, targets = self.planted_instance(seed=3)
        perm = np.random.default_rng(1).permutation(targets.size)
        w1, _ = fit_layer_weights(outputs, targets, steps=200, seed=0)
        w2, _ = fit_layer_weights(outputs[:, perm], targets[perm], steps=200, seed=0)
        assert np.max(np.abs(w1.weights - w2.weights)) < 1e-6


class TestLayerProfile:
    def test_emits_profile_and_separability(self, small_setup):
        import dataclasses

        from speechssl.trainer import train

        config, corpus, labels = small_setup
        config = dataclasses.replace(config, steps=2)
        ckpt, _ = train(config, corpus, labels)
        weights, accuracy, separability = layer_profile(ckpt, corpus, steps=50)
        assert len(weights) == config.encoder.num_layers + 1
        assert abs(weights.weights.sum() - 1.0) < 1e-8
        assert set(separability) == set(range(config.encoder.num_layers + 1))
        assert 0.0 <= accuracy <= 1.0


class TestAsciiBarChart:
    def test_renders_lines(self):
        chart = ascii_bar_chart({"layer0": 0.5, "layer1": 1.0})
        lines = chart.splitlines()
        assert len(lines) == 2
        assert lines[1].count("#") == 40
