import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regfeal.datagen import sample_orthogonal
from regfeal.metrics import feature_score, noise_level_score, projector, r2_score, subspace_distance


class TestR2:
    def test_perfect(self):
        y = np.array([1.0, 3.0, -2.0])
        assert r2_score(y, y) == 1.0

    def test_mean_predictor(self):
        y = np.array([1.0, 3.0, -2.0, 6.0])
        assert r2_score(y, np.full(4, y.mean())) == pytest.approx(0.0, abs=1e-15)

    def test_two_points(self):
        assert r2_score([0.0, 2.0], [1.0, 1.0]) == 0.0

    def test_can_be_negative(self):
        assert r2_score([0.0, 1.0], [1.0, 0.0]) < 0

    @pytest.mark.parametrize("y_true, y_pred", [([1.0, 1.0], [1.0, 2.0]), ([1.0], [1.0]), ([1.0, 2.0], [1.0])])
    def test_rejects(self, y_true, y_pred):
        with pytest.raises(ValueError):
            r2_score(y_true, y_pred)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-100, 100), scale=st.floats(0.1, 10))
    def test_affine_invariance(self, seed, shift, scale):
        rng = np.random.default_rng(seed)
        y, p = rng.standard_normal(20), rng.standard_normal(20)
        base = r2_score(y, p)
        assert r2_score(y + shift, p + shift) == pytest.approx(base, rel=1e-9, abs=1e-9)
        assert r2_score(scale * y, scale * p) == pytest.approx(base, rel=1e-9, abs=1e-9)
        assert r2_score(-scale * y, -scale * p) == pytest.approx(base, rel=1e-9, abs=1e-9)


class TestFeatureScore:
    def test_same_span(self):
        P = np.eye(4)[:, :2]
        P_hat = P @ np.array([[2.0, 1.0], [0.5, -1.0]])
        assert feature_score(P, P_hat) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert feature_score(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])) == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        assert feature_score(np.array([[1.0], [0.0]]), np.array([[1.0], [1.0]]) / np.sqrt(2)) == pytest.approx(0.5)

    def test_large_subspace_denominator(self):
        P = np.eye(4)[:, :3]
        P_hat = np.eye(4)[:, [0, 1, 3]]
        # projector difference has Frobenius^2 = 2, normaliser 2(d - s) = 2
        assert subspace_distance(P, P_hat) == pytest.approx(1.0)

    def test_clipped_for_oversized_estimate(self):
        P = np.eye(10)[:, :2]
        assert feature_score(P, np.eye(10)) == 0.0
        assert subspace_distance(P, np.eye(10)) == pytest.approx(2.0)

    def test_rank_deficient_rejected(self):
        with pytest.raises(ValueError):
            feature_score(np.eye(3)[:, :2], np.ones((3, 2)))

    def test_projector(self):
        Q = sample_orthogonal(4, np.random.default_rng(0))[:, :2]
        Pi = projector(Q)
        np.testing.assert_allclose(Pi @ Pi, Pi, atol=1e-12)
        np.testing.assert_allclose(Pi, Q @ Q.T, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 8))
    def test_basis_invariance_and_symmetry(self, seed, d):
        rng = np.random.default_rng(seed)
        s = int(rng.integers(1, d + 1))
        P = sample_orthogonal(d, rng)[:, :s]
        P_hat = sample_orthogonal(d, rng)[:, :s]
        base = feature_score(P, P_hat)
        A = rng.standard_normal((s, s)) + 3 * np.eye(s)
        assert feature_score(P, P_hat @ A) == pytest.approx(base, abs=1e-8)
        assert feature_score(P_hat, P) == pytest.approx(base, abs=1e-10)
        assert 0.0 <= base <= 1.0


def test_noise_level_score():
    y = np.array([-2.0, 0.0, 2.0, 4.0])
    assert noise_level_score(y, 1.0) == pytest.approx(1 - 4 / 20)
    assert noise_level_score(y, 0.0) == 1.0


def test_full_dimension_subspace():
    Q = sample_orthogonal(3, np.random.default_rng(2))
    assert feature_score(np.eye(3), Q) == pytest.approx(1.0)
