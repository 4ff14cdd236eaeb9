"""
Tests for landmark normalisation, PCA and frame balancing
"""
import numpy as np
import pytest

from data import SequenceRecord
from features import FeatureError, FeaturePipeline, PCAModel, balance_training_frames, fit_pca, load_pca, \
    normalize_landmarks, project, project_frames, save_pca


def _record(pspi):
    pspi = np.asarray(pspi)
    frames = np.random.default_rng(0).normal(size=(len(pspi), 6))
    return SequenceRecord(frames=frames, pspi=pspi, vas=0, opi=0)


class TestNormalize:
    def test_centred_unit_rms_unchanged(self):
        xs = np.array([1.0, -1.0, 0.0, 0.0])
        ys = np.array([0.0, 0.0, 1.0, -1.0])
        frame = np.concatenate([xs, ys])
        frame = frame / np.sqrt(np.mean(xs ** 2 + ys ** 2))
        np.testing.assert_allclose(normalize_landmarks(frame[None, :])[0], frame, atol=1e-12)

    def test_translation_invariant(self):
        frame = np.random.default_rng(1).normal(size=(1, 20))
        shifted = frame + 10.0
        np.testing.assert_allclose(normalize_landmarks(shifted), normalize_landmarks(frame), atol=1e-12)

    def test_scale_invariant(self):
        frame = np.random.default_rng(2).normal(size=(3, 20))
        np.testing.assert_allclose(normalize_landmarks(3.0 * frame), normalize_landmarks(frame), atol=1e-12)

    def test_degenerate_frame(self):
        with pytest.raises(FeatureError):
            normalize_landmarks(np.ones((2, 10)))


class TestPCA:
    def test_exact_rank(self):
        rng = np.random.default_rng(3)
        plane = rng.normal(size=(2, 10))
        X = rng.normal(size=(200, 2)) @ plane + 5.0
        model = fit_pca(X, 0.99)
        assert model.n_components == 2
        assert model.explained_variance_ratio.sum() == pytest.approx(1.0)

    def test_project_mean_is_zero(self):
        X = np.random.default_rng(4).normal(size=(50, 5))
        model = fit_pca(X, 0.95)
        np.testing.assert_allclose(project(model, model.mean), 0.0, atol=1e-12)

    def test_identity_basis(self):
        model = PCAModel(mean=np.zeros(3), basis=np.eye(3), explained_variance_ratio=np.ones(3) / 3,
                         explained_variance=np.ones(3))
        frame = np.array([0.3, -1.0, 2.0])
        np.testing.assert_array_equal(project(model, frame), frame)

    def test_project_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        model = fit_pca(rng.normal(size=(80, 6)), 0.9)
        frame = rng.normal(size=6)
        oracle = np.array([sum(model.basis[i, j] * (frame[j] - model.mean[j]) for j in range(6))
                           for i in range(model.n_components)])
        np.testing.assert_allclose(project(model, frame), oracle, atol=1e-10)
        np.testing.assert_allclose(project_frames(model, frame[None, :])[0], oracle, atol=1e-10)

    def test_orthonormal_sign_fixed_basis(self):
        model = fit_pca(np.random.default_rng(6).normal(size=(100, 8)), 0.95)
        np.testing.assert_allclose(model.basis @ model.basis.T, np.eye(model.n_components), atol=1e-10)
        for row in model.basis:
            assert row[np.argmax(np.abs(row))] > 0

    def _anisotropic(self, seed):
        rng = np.random.default_rng(seed)
        rotation, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        return (rng.normal(size=(300, 6)) * [5.0, 3.0, 2.0, 1.0, 0.5, 0.2]) @ rotation + 1.5

    def test_component_variances_are_eigenvalues(self):
        X = self._anisotropic(9)
        model = fit_pca(X, 0.9)
        Z = project_frames(model, X)
        np.testing.assert_allclose(Z.var(axis=0, ddof=1), model.explained_variance, rtol=1e-9)
        np.testing.assert_allclose(np.cov(Z, rowvar=False), np.diag(model.explained_variance), atol=1e-9)

    def test_reconstruction_error_is_discarded_variance(self):
        X = self._anisotropic(10)
        model = fit_pca(X, 0.8)
        assert model.n_components < 6
        centred = X - model.mean
        residual = centred - project_frames(model, X) @ model.basis
        discarded = X.var(axis=0, ddof=1).sum() - model.explained_variance.sum()
        assert np.sum(residual ** 2) / (len(X) - 1) == pytest.approx(discarded, rel=1e-9)

    def test_dimension_mismatch(self):
        model = fit_pca(np.random.default_rng(7).normal(size=(20, 4)), 0.9)
        with pytest.raises(FeatureError):
            project(model, np.zeros(5))

    def test_save_load(self, tmp_path):
        model = fit_pca(np.random.default_rng(8).normal(size=(30, 4)), 0.9)
        path = str(tmp_path / 'pca.json')
        save_pca(model, path)
        loaded = load_pca(path)
        np.testing.assert_allclose(loaded.basis, model.basis)
        np.testing.assert_allclose(loaded.mean, model.mean)


class TestBalancing:
    def test_closest_neutral_kept(self):
        kept = balance_training_frames([_record([0, 0, 0, 1, 0])])
        assert kept[0].tolist() == [2, 3]

    def test_all_pain_frames_kept(self):
        kept = balance_training_frames([_record([1, 2, 3, 4])])
        assert kept[0].tolist() == [0, 1, 2, 3]

    def test_all_neutral(self):
        kept = balance_training_frames([_record([0, 0, 0])])
        assert kept[0].size == 0

    def test_neutral_count_matches_ones_across_sequences(self):
        sequences = [_record([0, 0, 1, 1, 0, 0, 0]), _record([0, 0, 0, 0, 3, 0])]
        kept = balance_training_frames(sequences)
        neutral = sum(int(np.sum(s.pspi[k] == 0)) for s, k in zip(sequences, kept))
        assert neutral == 2
        assert {2, 3}.issubset(kept[0].tolist())
        assert 4 in kept[1].tolist()

    def test_empty(self):
        assert balance_training_frames([]) == []


def test_feature_pipeline_fit_transform():
    rng = np.random.default_rng(9)
    sequences = [SequenceRecord(frames=rng.normal(size=(15, 12)), pspi=np.zeros(15), vas=0, opi=0)
                 for _ in range(3)]
    pipeline = FeaturePipeline().fit(sequences, 0.95)
    out = pipeline.transform_sequence(sequences[0])
    assert out.shape == (15, pipeline.output_dim)
    with pytest.raises(FeatureError):
        FeaturePipeline().transform_frames(sequences[0].frames)


if __name__ == "__main__":
    pytest.main([__file__])
