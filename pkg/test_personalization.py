"""
Tests for the I-FES score and feature augmentation
"""
import itertools

import numpy as np
import pytest

from data import PersonRecord, SequenceRecord
from personalization import IFESScore, augment_features, compute_ifes, compute_ifes_with_selection, \
    compute_person_ifes, strip_personalization


def _person(labels):
    sequences = tuple(SequenceRecord(frames=np.zeros((2, 4)), pspi=np.zeros(2), vas=v, opi=o)
                      for o, v in labels)
    return PersonRecord('P01', sequences)


class TestIFES:
    def test_alpha_zero(self):
        assert compute_ifes([(3, 5), (1, 1)], 0).p == 1.0
        assert compute_ifes([], 0).p == 1.0

    def test_single_pair(self):
        assert compute_ifes([(3, 5)], 1).p == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_two_pairs(self):
        assert compute_ifes([(0, 0), (5, 10)], 2).p == pytest.approx(17.0 / 22.0, abs=1e-12)

    def test_range(self):
        pairs = list(itertools.product(range(6), range(11)))
        values = [compute_ifes([pair], 1).p for pair in pairs]
        assert min(values) == pytest.approx(1.0 / 11.0)
        assert max(values) == pytest.approx(6.0)

    def test_permutation_invariant(self):
        pairs = [(1, 4), (5, 2), (0, 9), (3, 3)]
        assert compute_ifes(pairs, 4).p == pytest.approx(compute_ifes(pairs[::-1], 4).p, abs=1e-15)

    def test_equal_reports_give_one(self):
        assert compute_ifes([(2, 2), (4, 4), (0, 0)], 3).p == pytest.approx(1.0)

    def test_alpha_too_large(self):
        with pytest.raises(ValueError):
            compute_ifes([(1, 1)], 2)

    @pytest.mark.parametrize("pair", [(6, 0), (0, 11), (-1, 3)])
    def test_invalid_pair(self, pair):
        with pytest.raises(ValueError):
            compute_ifes([pair], 1)

    def test_seeded_selection(self):
        pairs = [(o, v) for o, v in zip(range(6), range(0, 11, 2))]
        first = compute_ifes_with_selection(pairs, 2, seed=7)
        second = compute_ifes_with_selection(pairs, 2, seed=7)
        assert first == second
        score, chosen = first
        assert len(set(chosen)) == 2
        expected = np.mean([(pairs[k][0] + 1) / (pairs[k][1] + 1) for k in chosen])
        assert score.p == pytest.approx(expected)

    def test_person_ifes(self):
        score, held = compute_person_ifes(_person([(3, 5), (0, 0), (5, 10), (1, 2)]), 1, seed=3)
        assert score.person_id == 'P01' and score.alpha_used == 1
        assert len(held) == 1

    def test_score_validation(self):
        with pytest.raises(ValueError):
            IFESScore('x', 0.5, 0)


class TestAugment:
    def test_construction(self):
        np.testing.assert_array_equal(augment_features(np.array([0.2, 0.4]), 1.0), [[0.2, 1.0], [0.4, 1.0]])

    def test_constant_column(self):
        out = augment_features(np.array([[0.1], [0.2], [0.3]]), 0.75)
        np.testing.assert_array_equal(out[:, 1], [0.75, 0.75, 0.75])

    def test_strip(self):
        original = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(strip_personalization(augment_features(original, 0.3)), original)


if __name__ == "__main__":
    pytest.main([__file__])
