"""
Tests for HCRF potentials, forward-backward inference and training
"""
import itertools

import numpy as np
import pytest
from scipy.special import logsumexp

from hcrf import BATCH_SEQUENCES, HCRFError, HCRFModel, HCRFTrainConfig, add_bias, brute_force_class_posterior, \
    brute_force_log_partition, brute_force_state_marginals, class_posterior, edge_potential, load_hcrf, \
    log_partition, pack, predict_vas, rll_and_gradient, save_hcrf, select_lambda, sequence_score, \
    state_marginals, train_hcrf, training_accuracy, unary_potential, unpack
from optim import LBFGSConfig, finite_difference_gradient, relative_error


def random_model(K, C, d, rng, scale=1.0):
    return HCRFModel.random(K, C, d, scale, rng)


def random_instance(rng, K_max=3, C_max=3, T_max=6, d_max=3):
    K, C = int(rng.integers(1, K_max + 1)), int(rng.integers(1, C_max + 1))
    T, d = int(rng.integers(1, T_max + 1)), int(rng.integers(1, d_max + 1))
    return random_model(K, C, d, rng), rng.normal(size=(T, d))


class TestPotentials:
    def test_zero_model(self):
        model = HCRFModel.zeros(2, 3, 2)
        assert unary_potential(model, 1, 2, np.array([0.3, 0.4])) == 0.0
        assert edge_potential(model, 0, 1, 2) == 0.0
        assert sequence_score(model, 1, np.ones((4, 2)), [0, 1, 2, 0]) == 0.0

    def test_unary_basis(self):
        model = HCRFModel.zeros(1, 2, 3)
        model.u[0, 1] = [1.0, 0.0, 0.0]
        assert unary_potential(model, 0, 1, np.array([0.3, 5.0, -2.0])) == pytest.approx(0.3)

    def test_unary_scalar_loop(self):
        rng = np.random.default_rng(0)
        model = random_model(3, 4, 5, rng)
        frame = rng.normal(size=5)
        for k, c in itertools.product(range(3), range(4)):
            expected = sum(model.u[k, c, j] * frame[j] for j in range(5))
            assert unary_potential(model, k, c, frame) == pytest.approx(expected, abs=1e-14)

    def test_edge_identity(self):
        model = HCRFModel(np.zeros((1, 3, 1)), np.eye(3)[None])
        for c, l in itertools.product(range(3), repeat=2):
            assert edge_potential(model, 0, c, l) == (1.0 if c == l else 0.0)

    def test_sequence_score_by_hand(self):
        rng = np.random.default_rng(1)
        model = random_model(2, 2, 2, rng)
        S = rng.normal(size=(3, 2))
        H = [1, 0, 1]
        expected = (model.u[1, 1] @ S[0] + model.u[1, 0] @ S[1] + model.u[1, 1] @ S[2]
                    + model.m[1, 1, 0] + model.m[1, 0, 1])
        assert sequence_score(model, 1, S, H) == pytest.approx(expected, abs=1e-12)

    def test_single_frame_has_no_edges(self):
        rng = np.random.default_rng(2)
        model = random_model(1, 2, 2, rng)
        S = rng.normal(size=(1, 2))
        assert sequence_score(model, 0, S, [1]) == pytest.approx(model.u[0, 1] @ S[0])

    def test_index_errors(self):
        model = HCRFModel.zeros(2, 2, 2)
        with pytest.raises(HCRFError):
            unary_potential(model, 2, 0, np.zeros(2))
        with pytest.raises(HCRFError):
            edge_potential(model, 0, 0, 5)
        with pytest.raises(HCRFError):
            class_posterior(model, np.zeros((3, 3)))


class TestInference:
    def test_zero_model_partition(self):
        model = HCRFModel.zeros(2, 3, 2)
        assert log_partition(model, 1, np.ones((5, 2))) == pytest.approx(5 * np.log(3))

    def test_single_frame_partition(self):
        rng = np.random.default_rng(3)
        model = random_model(2, 3, 2, rng)
        S = rng.normal(size=(1, 2))
        assert log_partition(model, 0, S) == pytest.approx(logsumexp(model.u[0] @ S[0]))

    def test_partition_matches_brute_force(self):
        rng = np.random.default_rng(4)
        model = random_model(3, 3, 2, rng)
        S = rng.normal(size=(4, 2))
        for k in range(3):
            exact = log_partition(model, k, S)
            assert abs(exact - brute_force_log_partition(model, k, S)) <= 1e-10 * max(1.0, abs(exact))

    def test_partition_random_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            model, S = random_instance(rng)
            for k in range(model.n_classes):
                exact = log_partition(model, k, S)
                oracle = brute_force_log_partition(model, k, S)
                assert abs(exact - oracle) <= 1e-10 * max(1.0, abs(oracle))

    def test_zero_model_posterior_uniform(self):
        np.testing.assert_allclose(class_posterior(HCRFModel.zeros(4, 2, 3), np.ones((3, 3))), 0.25)

    def test_identical_classes(self):
        rng = np.random.default_rng(6)
        single = random_model(1, 3, 2, rng)
        model = HCRFModel(np.repeat(single.u, 2, axis=0), np.repeat(single.m, 2, axis=0))
        np.testing.assert_allclose(class_posterior(model, rng.normal(size=(4, 2))), [0.5, 0.5])

    def test_posterior_matches_brute_force(self):
        rng = np.random.default_rng(7)
        model = random_model(3, 2, 2, rng)
        S = rng.normal(size=(3, 2))
        np.testing.assert_allclose(class_posterior(model, S), brute_force_class_posterior(model, S), atol=1e-12)

    def test_marginals_match_brute_force(self):
        rng = np.random.default_rng(8)
        model = random_model(2, 2, 3, rng)
        S = rng.normal(size=(3, 3))
        for k in range(2):
            unary, pairwise = state_marginals(model, k, S)
            oracle_unary, oracle_pairwise = brute_force_state_marginals(model, k, S)
            np.testing.assert_allclose(unary, oracle_unary, atol=1e-10)
            np.testing.assert_allclose(pairwise, oracle_pairwise, atol=1e-10)

    def test_zero_model_marginals(self):
        unary, pairwise = state_marginals(HCRFModel.zeros(1, 4, 2), 0, np.ones((3, 2)))
        np.testing.assert_allclose(unary, 0.25)
        np.testing.assert_allclose(pairwise, 1.0 / 16)

    def test_single_frame_marginals(self):
        rng = np.random.default_rng(9)
        model = random_model(1, 3, 2, rng)
        S = rng.normal(size=(1, 2))
        unary, pairwise = state_marginals(model, 0, S)
        scores = model.u[0] @ S[0]
        np.testing.assert_allclose(unary[0], np.exp(scores - logsumexp(scores)), atol=1e-12)
        assert pairwise.shape[0] == 0

    def test_marginal_consistency(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            model, S = random_instance(rng)
            posterior = class_posterior(model, S)
            assert abs(posterior.sum() - 1.0) <= 1e-12 and posterior.min() >= 0
            for k in range(model.n_classes):
                unary, pairwise = state_marginals(model, k, S)
                np.testing.assert_allclose(unary.sum(axis=1), 1.0, atol=1e-12)
                np.testing.assert_allclose(pairwise.sum(axis=2), unary[:-1], atol=1e-10)
                np.testing.assert_allclose(pairwise.sum(axis=1), unary[1:], atol=1e-10)

    def test_unary_shift_invariance(self):
        rng = np.random.default_rng(11)
        model = random_model(3, 2, 3, rng)
        S = add_bias(rng.normal(size=(5, 2)))
        shifted_u = model.u.copy()
        shifted_u[:, :, -1] += 1.7
        shifted = HCRFModel(shifted_u, model.m)
        np.testing.assert_allclose(class_posterior(shifted, S), class_posterior(model, S), atol=1e-12)

    def test_state_relabeling_invariance(self):
        rng = np.random.default_rng(12)
        model = random_model(3, 3, 2, rng)
        perm = np.array([2, 0, 1])
        relabeled = HCRFModel(model.u[:, perm], model.m[:, perm][:, :, perm])
        S = rng.normal(size=(4, 2))
        np.testing.assert_allclose(class_posterior(relabeled, S), class_posterior(model, S), atol=1e-12)

    def test_predict_zero_model_ties_low(self):
        assert predict_vas(HCRFModel.zeros(11, 2, 2), np.ones((3, 2))) == 0

    def test_predict_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            model = random_model(3, 2, 2, rng)
            S = rng.normal(size=(3, 2))
            assert predict_vas(model, S) == int(np.argmax(brute_force_class_posterior(model, S)))

    def test_brute_force_limit(self):
        with pytest.raises(HCRFError):
            brute_force_log_partition(HCRFModel.zeros(1, 11, 1), 0, np.ones((7, 1)))


class TestLearning:
    def test_zero_model_objective(self):
        model = HCRFModel.zeros(3, 2, 2)
        sequences = [np.ones((4, 2))] * 3
        value, grad = rll_and_gradient(model, sequences, [0, 1, 2], lam=0.0)
        assert value == pytest.approx(3 * np.log(3))
        np.testing.assert_allclose(grad.m, 0.0, atol=1e-14)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        K, C, T, d = 3, 2, 4, 2
        lam = 0.0 if seed % 2 == 0 else 0.5
        model = random_model(K, C, d, rng)
        sequences = [rng.normal(size=(T, d)) for _ in range(3)]
        labels = rng.integers(0, K, size=3).tolist()
        _, grad = rll_and_gradient(model, sequences, labels, lam)
        numeric = finite_difference_gradient(
            lambda x: rll_and_gradient(unpack(x, K, C, d), sequences, labels, lam)[0], pack(model), h=1e-6)
        assert np.max(relative_error(pack(grad), numeric)) < 1e-5

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(14)
        model = random_model(3, 2, 2, rng)
        sequences = [rng.normal(size=(int(rng.integers(1, 6)), 2)) for _ in range(3 * BATCH_SEQUENCES)]
        labels = [i % 3 for i in range(len(sequences))]
        serial = rll_and_gradient(model, sequences, labels, 0.3)
        parallel = rll_and_gradient(model, sequences, labels, 0.3, n_workers=3)
        assert serial[0] == parallel[0]
        np.testing.assert_array_equal(pack(serial[1]), pack(parallel[1]))

    def test_padded_batches_match_single_sequences(self):
        rng = np.random.default_rng(15)
        model = random_model(4, 3, 2, rng, scale=1.5)
        sequences = [rng.normal(size=(int(rng.integers(1, 9)), 2)) for _ in range(BATCH_SEQUENCES + 7)]
        labels = rng.integers(0, 4, size=len(sequences)).tolist()
        value, grad = rll_and_gradient(model, sequences, labels, 0.2)
        singles = [rll_and_gradient(model, [S], [y], 0.0) for S, y in zip(sequences, labels)]
        reg = 0.2 * np.sum(pack(model) ** 2)
        assert value == pytest.approx(reg + sum(v for v, _ in singles), rel=1e-10)
        expected = 0.4 * pack(model) + np.sum([pack(g) for _, g in singles], axis=0)
        np.testing.assert_allclose(pack(grad), expected, rtol=1e-9, atol=1e-10)

    def test_objective_matches_log_partitions_with_large_weights(self):
        rng = np.random.default_rng(16)
        model = random_model(3, 4, 2, rng, scale=20.0)
        sequences = [rng.normal(size=(T, 2)) for T in (1, 5, 12)]
        labels = [2, 0, 1]
        value, _ = rll_and_gradient(model, sequences, labels, 0.0)
        expected = 0.0
        for S, y in zip(sequences, labels):
            z = np.array([log_partition(model, k, S) for k in range(3)])
            expected += logsumexp(z) - z[y]
        assert value == pytest.approx(expected, rel=1e-9, abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(HCRFError):
            rll_and_gradient(HCRFModel.zeros(2, 2, 1), [np.ones((2, 1))], [2], 0.0)

    def _separable(self):
        sequences = [add_bias(np.array([[-1.0]])), add_bias(np.array([[1.0]])),
                     add_bias(np.array([[-0.8]])), add_bias(np.array([[1.2]]))]
        return sequences, [0, 1, 0, 1]

    def test_separable_training(self):
        sequences, labels = self._separable()
        cfg = HCRFTrainConfig(n_classes=2, n_states=2, lam=0.01)
        model, result = train_hcrf(sequences, labels, cfg)
        assert training_accuracy(model, sequences, labels) == 1.0
        assert [predict_vas(model, S) for S in sequences] == labels
        assert result.accepted_values[-1] <= result.accepted_values[0]
        values = result.accepted_values
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_regularisation_shrinks_parameters(self):
        sequences, labels = self._separable()
        norms = []
        for lam in (0.01, 1.0, 100.0):
            model, _ = train_hcrf(sequences, labels, HCRFTrainConfig(n_classes=2, n_states=2, lam=lam))
            norms.append(np.linalg.norm(pack(model)))
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < 0.05

    def test_strong_regularisation_uniform_posterior(self):
        sequences, labels = self._separable()
        model, _ = train_hcrf(sequences, labels, HCRFTrainConfig(n_classes=2, n_states=2, lam=1e4))
        for S in sequences:
            np.testing.assert_allclose(class_posterior(model, S), 0.5, atol=1e-3)

    def test_deterministic(self):
        sequences, labels = self._separable()
        cfg = HCRFTrainConfig(n_classes=2, n_states=3, lam=0.1, seed=4, lbfgs=LBFGSConfig(max_iterations=30))
        first, _ = train_hcrf(sequences, labels, cfg)
        second, _ = train_hcrf(sequences, labels, cfg)
        np.testing.assert_array_equal(pack(first), pack(second))

    def test_empty_training_set(self):
        with pytest.raises(HCRFError):
            train_hcrf([], [], HCRFTrainConfig())

    def test_select_lambda(self):
        sequences, labels = self._separable()
        sequences, labels = sequences * 3, labels * 3
        groups = [f"P{i // 2}" for i in range(len(sequences))]
        cfg = HCRFTrainConfig(n_classes=2, n_states=2, lbfgs=LBFGSConfig(max_iterations=50))
        lam = select_lambda(sequences, labels, groups, [0.01, 0.1, 1.0, 10.0], cfg, seed=0)
        assert lam in (0.01, 0.1, 1.0, 10.0)
        assert select_lambda(sequences, labels, groups, [], cfg, seed=0) == cfg.lam


def test_save_load(tmp_path):
    model = random_model(3, 2, 4, np.random.default_rng(15))
    path = str(tmp_path / 'hcrf.json')
    save_hcrf(model, path, {'lambda': 0.1})
    loaded = load_hcrf(path)
    np.testing.assert_array_equal(loaded.u, model.u)
    np.testing.assert_array_equal(loaded.m, model.m)


if __name__ == "__main__":
    pytest.main([__file__])
