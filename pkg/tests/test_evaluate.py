import numpy as np
import pytest

from aftkit import (AttackConfig, EncoderConfig, Tensor, cosine_deviation,
                    init_model, synth_generate, SynthSpec, zero_shot_predict)
from aftkit.encoders import Vocabulary, encode_images
from aftkit.errors import ConfigError
from aftkit.evaluate import evaluate

RNG = np.random.default_rng(31)

SPEC = SynthSpec(num_concepts=4, pairs_per_concept=20, image_size=4,
                 noise_sigma=0.05, seed=3)


def toy_model(seed=0):
    vision = EncoderConfig(input_dim=48, hidden_dims=[24], embed_dim=8)
    text = EncoderConfig(input_dim=12, hidden_dims=[12], embed_dim=8)
    return init_model(vision, text, tau=0.07, seed=seed, vocab_size=20)


class TestZeroShotPredict:
    def test_matching_class_wins(self):
        model = toy_model()
        img = RNG.uniform(0, 1, (1, 3, 4, 4))
        emb = encode_images(model, img.reshape(1, -1)).data[0]
        # class 2 aligned with the embedding, others orthogonal to it
        basis = np.linalg.qr(np.column_stack([emb] + [RNG.normal(size=8)
                                                      for _ in range(2)]))[0]
        cls = Tensor(np.vstack([basis[:, 1], basis[:, 2], emb]))
        assert zero_shot_predict(model, img[0], cls) == 2

    def test_invariant_under_positive_scaling(self):
        model = toy_model()
        img = RNG.uniform(0, 1, (3, 4, 4))
        cls = Tensor(RNG.normal(size=(5, 8)))
        base = zero_shot_predict(model, img, cls)
        # scaling the image pre-normalization cannot change the embedding
        assert zero_shot_predict(model, img, Tensor(cls.data * 3.0)) == base

    def test_tie_breaks_to_lowest_index(self):
        model = toy_model()
        img = RNG.uniform(0, 1, (3, 4, 4))
        emb = encode_images(model, img.reshape(1, -1)).data
        cls = Tensor(np.vstack([emb, emb]))   # exact two-way tie
        assert zero_shot_predict(model, img, cls) == 0

    def test_no_classes(self):
        model = toy_model()
        with pytest.raises(ConfigError):
            zero_shot_predict(model, RNG.uniform(0, 1, (3, 4, 4)),
                              Tensor(np.zeros((0, 8))))


class TestCosineDeviation:
    def test_identical_rows_zero(self):
        e = Tensor(np.eye(3))
        phis, mean = cosine_deviation(e, Tensor(np.eye(3)))
        assert np.allclose(phis, 0.0)
        assert mean == 0.0

    def test_orthogonal_rows(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        b = Tensor(np.array([[0.0, 1.0]]))
        phis, _ = cosine_deviation(a, b)
        assert abs(phis[0] - np.pi / 2) < 1e-12

    def test_symmetric_in_arguments(self):
        a = RNG.normal(size=(4, 6))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b = RNG.normal(size=(4, 6))
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        p1, m1 = cosine_deviation(Tensor(a), Tensor(b))
        p2, m2 = cosine_deviation(Tensor(b), Tensor(a))
        assert np.array_equal(p1, p2) and m1 == m2

    def test_range(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        b = Tensor(np.array([[-1.0, 0.0]]))
        phis, _ = cosine_deviation(a, b)
        assert abs(phis[0] - np.pi) < 1e-12


class TestEvaluate:
    def setup_method(self):
        _, self.ds = synth_generate(SPEC)
        self.vocab = Vocabulary.from_texts(
            ["this is a photo of a " + c for c in self.ds.class_names])
        self.model = toy_model()

    def test_zero_eps_attack_equals_clean(self):
        cfg = AttackConfig(epsilon=0.0, step_size=0.0, steps=1, objective="ce",
                           track_best=True)
        report = evaluate(self.model, self.ds, [cfg], self.vocab)
        assert report.attacks[0]["robust_acc"] == report.clean_acc

    def test_untrained_model_near_chance(self):
        accs = []
        for seed in range(5):
            model = toy_model(seed)
            report = evaluate(model, self.ds, [], self.vocab)
            accs.append(report.clean_acc)
        # 4 classes: chance is 0.25; random projections are noisy, so only
        # require the seed-average to sit well inside (0, 1)
        assert 0.02 < np.mean(accs) < 0.65

    def test_contrastive_eval_attack_rejected(self):
        cfg = AttackConfig(epsilon=0.01, step_size=0.01, steps=1,
                           objective="contrastive")
        with pytest.raises(ConfigError):
            evaluate(self.model, self.ds, [cfg], self.vocab)

    def test_report_structure_and_phi(self):
        cfg = AttackConfig(epsilon=0.02, step_size=0.01, steps=2, objective="ce",
                           track_best=True)
        report = evaluate(self.model, self.ds, [cfg], self.vocab, dataset_id="toy")
        d = report.to_dict()
        assert d["dataset"] == "toy"
        assert d["n"] == len(self.ds.labels)
        assert 0.0 <= d["clean_acc"] <= 1.0
        assert 0.0 <= d["attacks"][0]["robust_acc"] <= 1.0
        assert 0.0 <= d["phi"]["mean"] <= d["phi"]["max"] <= np.pi
