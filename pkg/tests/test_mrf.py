import numpy as np
import pytest

from polsar_rlrmf.data import FeatureImage, LabelMap, SynthConfig, pauli_image, synth_generate
from polsar_rlrmf.mrf import (
    MrfModel,
    brute_force_min,
    build_model,
    discontinuities,
    energy,
    min_sum_bp,
)


def random_model(rng, h, w, c, alpha=None):
    unary = rng.exponential(1.0, size=(h, w, c))
    alpha = rng.uniform(0.2, 2.0) if alpha is None else alpha
    return MrfModel(unary, rng.uniform(0.05, 1, (h, w - 1)), rng.uniform(0.05, 1, (h - 1, w)), alpha)


def viterbi_chain(unary, lam):
    """Exact minimum of a 1-D Potts chain by dynamic programming."""
    n, c = unary.shape
    cost = unary[0].copy()
    for t in range(1, n):
        trans = cost[:, None] + lam[t - 1] * (1 - np.eye(c))
        cost = trans.min(axis=0) + unary[t]
    return cost.min()


def loop_energy(m, lab):
    """Independent energy: explicit loops, vertical edges first."""
    h, w, _ = m.unary.shape
    e = 0.0
    for j in range(w):
        for i in range(h - 1):
            e += m.alpha * m.w_v[i, j] * (lab[i, j] != lab[i + 1, j])
    for i in reversed(range(h)):
        for j in reversed(range(w)):
            e += m.unary[i, j, lab[i, j] - 1]
            if j < w - 1:
                e += m.alpha * m.w_h[i, j] * (lab[i, j] != lab[i, j + 1])
    return e


class TestBuildModel:
    def test_unary_and_clamp(self):
        p = np.array([[[0.5, 0.5, 0.0]]])
        m = build_model(p, FeatureImage(np.zeros((1, 1, 3))))
        np.testing.assert_allclose(m.unary[0, 0], [np.log(2), np.log(2), -np.log(1e-12)])

    def test_identical_neighbours_weight_one(self):
        z = np.zeros((2, 3, 3))
        z[:, 2] = 1.0
        m = build_model(np.full((2, 3, 2), 0.5), FeatureImage(z))
        assert np.all(m.w_v == 1.0)
        assert np.all(m.w_h[:, 0] == 1.0)
        # sigma = mean of the 7 squared distances = 3 * 2 / 7
        np.testing.assert_allclose(m.w_h[:, 1], np.exp(-3 / (2 * 6 / 7)))

    def test_constant_features_weight_one(self):
        m = build_model(np.full((3, 3, 2), 0.5), FeatureImage(np.ones((3, 3, 3))))
        assert np.all(m.w_h == 1) and np.all(m.w_v == 1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_model(np.full((3, 3, 2), 0.5), FeatureImage(np.ones((3, 4, 3))))

    def test_boundary_edges_weaker(self):
        scene = synth_generate(SynthConfig(height=64, width=64, seed=2))
        m = build_model(np.full((64, 64, 6), 1 / 6), pauli_image(scene.clean))
        lab = scene.truth.labels
        cut_h, cut_v = lab[:, 1:] != lab[:, :-1], lab[1:] != lab[:-1]
        boundary = np.concatenate([m.w_h[cut_h], m.w_v[cut_v]])
        interior = np.concatenate([m.w_h[~cut_h], m.w_v[~cut_v]])
        assert boundary.mean() < interior.mean()


class TestEnergy:
    def test_uniform_constant(self):
        m = build_model(np.full((4, 5, 3), 1 / 3), FeatureImage(np.zeros((4, 5, 3))))
        assert energy(m, LabelMap(np.full((4, 5), 2), 3)) == pytest.approx(20 * np.log(3))

    def test_checkerboard_constant_z(self):
        m = build_model(np.full((4, 4, 2), 0.5), FeatureImage(np.zeros((4, 4, 3))), alpha=5.0)
        lab = (np.indices((4, 4)).sum(axis=0) % 2) + 1
        edges = 2 * 4 * 3
        assert energy(m, LabelMap(lab, 2)) == pytest.approx(16 * np.log(2) + 5.0 * edges)

    def test_matches_reordered_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = random_model(rng, 6, 7, 4)
            lab = rng.integers(1, 5, (6, 7))
            assert abs(energy(m, LabelMap(lab, 4)) - loop_energy(m, lab)) < 1e-10

    def test_unlabeled_rejected(self):
        m = random_model(np.random.default_rng(1), 2, 2, 2)
        with pytest.raises(ValueError):
            energy(m, LabelMap(np.array([[1, 0], [2, 1]]), 2))

    def test_potts_permutation_symmetry(self):
        rng = np.random.default_rng(2)
        m = random_model(rng, 5, 5, 4)
        lab = rng.integers(1, 5, (5, 5))
        perm = rng.permutation(4)
        m2 = MrfModel(m.unary[..., np.argsort(perm)], m.w_h, m.w_v, m.alpha)
        assert energy(m2, LabelMap(perm[lab - 1] + 1, 4)) == pytest.approx(energy(m, LabelMap(lab, 4)), abs=1e-12)


class TestBp:
    def test_alpha_zero_is_argmax(self):
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.ones(4), size=(8, 9))
        m = build_model(p, FeatureImage(rng.random((8, 9, 3))), alpha=0.0)
        lab, _ = min_sum_bp(m)
        np.testing.assert_array_equal(lab.labels, p.argmax(axis=-1) + 1)

    def test_chains_match_viterbi(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            m = random_model(rng, 1, 32, 4)
            lab, e = min_sum_bp(m)
            exact = viterbi_chain(m.unary[0], m.alpha * m.w_h[0])
            assert abs(e - exact) <= 1e-9 * max(1.0, exact)
            assert e == energy(m, lab)

    def test_small_grids_match_brute_force(self):
        rng = np.random.default_rng(5)
        hits = 0
        for _ in range(100):
            m = random_model(rng, 3, 3, 2)
            lab, e = min_sum_bp(m)
            _, exact = brute_force_min(m)
            argmax_e = energy(m, LabelMap(m.unary.argmin(axis=-1) + 1, 2))
            assert e <= argmax_e
            assert e >= exact - 1e-12
            hits += e - exact < 1e-9
        assert hits >= 95

    def test_normalization_does_not_change_labels(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            m = random_model(rng, 4, 5, 3)
            a, _ = min_sum_bp(m, iters=20, normalize=True)
            b, _ = min_sum_bp(m, iters=20, normalize=False)
            assert a == b

    def test_ties_pick_smallest_label(self):
        m = MrfModel(np.zeros((2, 2, 3)), np.ones((2, 1)), np.ones((1, 2)), 1.0)
        lab, e = min_sum_bp(m)
        assert np.all(lab.labels == 1) and e == 0.0

    def test_invalid_arguments(self):
        m = random_model(np.random.default_rng(7), 2, 2, 2)
        with pytest.raises(ValueError):
            min_sum_bp(m, iters=0)
        with pytest.raises(ValueError):
            min_sum_bp(m, damping=1.0)

    def test_smooths_noisy_probabilities(self):
        rng = np.random.default_rng(8)
        truth = np.ones((20, 20), dtype=int)
        truth[:, 10:] = 2
        p = np.where((truth == 1)[..., None], [0.7, 0.3], [0.3, 0.7])
        flip = rng.random((20, 20)) < 0.15
        p[flip] = p[flip][:, ::-1]
        z = np.zeros((20, 20, 3))
        z[truth == 2] = 1.0
        lab, _ = min_sum_bp(build_model(p, FeatureImage(z), alpha=5.0))
        noisy = LabelMap(p.argmax(axis=-1) + 1, 2)
        assert discontinuities(lab) < discontinuities(noisy)
        assert np.mean(lab.labels == truth) > np.mean(noisy.labels == truth)


class TestBruteForce:
    def test_limit(self):
        m = random_model(np.random.default_rng(9), 3, 7, 2)
        with pytest.raises(ValueError):
            brute_force_min(m)

    def test_two_pixels(self):
        m = MrfModel(np.array([[[0.0, 1.0], [1.5, 0.0]]]), np.array([[1.0]]), np.zeros((0, 2)), 2.0)
        lab, e = brute_force_min(m)
        # (1,2) costs 0 + 0 + 2; (2,2) costs 1 + 0; (1,1) costs 0 + 1.5
        np.testing.assert_array_equal(lab.labels, [[2, 2]])
        assert e == pytest.approx(1.0)
