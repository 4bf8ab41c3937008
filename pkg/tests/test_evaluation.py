import numpy as np
import pytest

from polsar_rlrmf.cnn import TrainConfig
from polsar_rlrmf.data import LabelMap, SynthConfig, synth_generate
from polsar_rlrmf.evaluation import (
    AblationConfig,
    ablation_run,
    fit_logistic,
    score,
    stratified_sample,
)


class TestScore:
    def test_perfect(self):
        t = LabelMap(np.array([[1, 2], [3, 0]]), 3)
        s = score(LabelMap(np.array([[1, 2], [3, 1]]), 3), t)
        assert s.overall == 1.0
        np.testing.assert_array_equal(s.class_accuracy, [1, 1, 1])
        assert s.total == 3

    def test_constant_prediction(self):
        t = LabelMap(np.array([[1, 1, 2, 2]]), 2)
        s = score(LabelMap(np.ones((1, 4), dtype=int), 2), t)
        assert s.overall == 0.5
        np.testing.assert_array_equal(s.class_accuracy, [1.0, 0.0])

    def test_hand_counted_4x4(self):
        truth = np.array([[1, 1, 2, 2],
                          [1, 1, 2, 2],
                          [3, 3, 3, 0],
                          [3, 3, 0, 0]])
        pred = np.array([[1, 2, 2, 2],
                         [1, 3, 2, 1],
                         [3, 3, 2, 1],
                         [3, 1, 2, 3]])
        s = score(LabelMap(pred, 3), LabelMap(truth, 3))
        # truth 1: predicted 1,2,1,3; truth 2: 2,2,2,1; truth 3: 3,3,2,3,1
        expected = np.array([[2, 1, 1],
                             [1, 3, 0],
                             [1, 1, 3]])
        np.testing.assert_array_equal(s.confusion, expected)
        np.testing.assert_allclose(s.class_accuracy, [2 / 4, 3 / 4, 3 / 5])
        assert s.overall == pytest.approx(8 / 13)

    def test_oa_is_prevalence_weighted_ca(self):
        rng = np.random.default_rng(0)
        truth = LabelMap(rng.integers(0, 5, (30, 30)), 4)
        pred = LabelMap(rng.integers(1, 5, (30, 30)), 4)
        s = score(pred, truth)
        prevalence = s.confusion.sum(axis=1) / s.total
        assert s.overall == pytest.approx(float(prevalence @ s.class_accuracy), abs=1e-14)

    def test_unlabeled_pixels_do_not_matter(self):
        rng = np.random.default_rng(1)
        t = rng.integers(1, 4, (6, 6))
        p = rng.integers(1, 4, (6, 6))
        base = score(LabelMap(p, 3), LabelMap(t, 3))
        t2 = np.zeros((6, 9), dtype=int)
        t2[:, :6] = t
        p2 = np.hstack([p, rng.integers(1, 4, (6, 3))])
        wider = score(LabelMap(p2, 3), LabelMap(t2, 3))
        np.testing.assert_array_equal(base.confusion, wider.confusion)
        assert base.overall == wider.overall

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            score(LabelMap(np.ones((2, 3), dtype=int), 2), LabelMap(np.ones((3, 2), dtype=int), 2))


class TestLogistic:
    def test_separable(self):
        rng = np.random.default_rng(0)
        centres = np.array([[0, 0], [3, 0], [0, 3]])
        y = rng.integers(1, 4, 300)
        x = centres[y - 1] + 0.3 * rng.standard_normal((300, 2))
        model = fit_logistic(x, y, 3)
        assert np.mean(model.predict(x) == y) == 1.0
        p = model.predict_proba(x)
        np.testing.assert_allclose(p.sum(axis=1), 1)

    def test_constant_feature_tolerated(self):
        x = np.column_stack([np.r_[np.zeros(10), np.ones(10)], np.full(20, 7.0)])
        y = np.r_[np.ones(10, int), np.full(10, 2)]
        assert np.all(fit_logistic(x, y, 2).predict(x) == y)


class TestStratified:
    def test_per_class_counts(self):
        lab = np.zeros((10, 20), dtype=int)
        lab[:, :10], lab[:5, 10:] = 1, 2
        idx = stratified_sample(LabelMap(lab, 2), 0.2, 0)
        picked = lab.ravel()[idx]
        assert np.sum(picked == 1) == 20 and np.sum(picked == 2) == 10
        assert np.all(picked > 0)

    def test_insufficient(self):
        lab = np.ones((10, 10), dtype=int)
        lab[0, 0] = 2
        with pytest.raises(ValueError, match="class 2"):
            stratified_sample(LabelMap(lab, 2), 0.1, 0)

    def test_deterministic(self):
        lab = LabelMap(np.random.default_rng(0).integers(1, 4, (30, 30)), 3)
        assert np.array_equal(stratified_sample(lab, 0.05, 3), stratified_sample(lab, 0.05, 3))


class TestAblation:
    def test_clean_scene_variants_agree(self):
        scene = synth_generate(SynthConfig(height=48, width=48, granularity=12, mog=((1.0, 1e-300),), seed=3))
        cfg = AblationConfig(label_fraction=0.1, train=TrainConfig(max_epochs=30))
        rep = ablation_run(scene.clean, scene.truth, cfg, variants=("raw-simple", "rlrmf-simple"))
        assert abs(rep.oa("raw-simple") - rep.oa("rlrmf-simple")) <= 0.01
        assert rep.oa("raw-simple") == 1.0

    def test_same_seed_same_report(self):
        scene = synth_generate(SynthConfig(height=32, width=32, granularity=10, seed=1))
        cfg = AblationConfig(label_fraction=0.1, train=TrainConfig(max_epochs=2))
        variants = ("raw-simple", "raw-cnn", "raw-cnn-mrf")
        a = ablation_run(scene.noisy, scene.truth, cfg, variants=variants)
        b = ablation_run(scene.noisy, scene.truth, cfg, variants=variants)
        assert a.to_csv() == b.to_csv()
        assert a.to_text().splitlines()[0].split()[:2] == ["variant", "OA"]
        assert len(a.to_csv().splitlines()) == 4

    def test_unknown_variant(self):
        scene = synth_generate(SynthConfig(height=16, width=16, granularity=8))
        with pytest.raises(ValueError):
            ablation_run(scene.noisy, scene.truth, variants=("rf-raw",))
