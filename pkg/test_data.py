"""
Tests for cohort loading, splitting and synthetic generation
"""
import json
import os

import numpy as np
import pandas as pd
import pytest

from data import Cohort, CohortError, SequenceRecord, SyntheticConfig, check_pspi_consistency, \
    expressiveness_factors, generate_synthetic_cohort, load_cohort, save_cohort, split_subject_independent
from personalization import compute_ifes


def _small_cohort(n_persons=2, sequences=1, T=3, seed=0, **kwargs):
    cfg = SyntheticConfig(n_persons=n_persons, sequences_per_person=sequences, t_min=T, t_max=T, **kwargs)
    return generate_synthetic_cohort(cfg, seed)


def _assert_same_cohort(a: Cohort, b: Cohort):
    assert a.person_ids() == b.person_ids()
    for pa, pb in zip(a.persons, b.persons):
        assert pa.labels == pb.labels
        for sa, sb in zip(pa.sequences, pb.sequences):
            np.testing.assert_array_equal(sa.frames, sb.frames)
            np.testing.assert_array_equal(sa.pspi, sb.pspi)


class TestLoadCohort:
    def test_round_trip_structure(self, tmp_path):
        cohort = _small_cohort(sequences=2, T=5)
        manifest = save_cohort(cohort, str(tmp_path))
        loaded = load_cohort(manifest)
        assert len(loaded.persons) == 2
        assert all(s.length == 5 for s in loaded.sequences())
        assert loaded.feature_dim == 132
        assert loaded.person_ids() == cohort.person_ids()
        for pa, pb in zip(cohort.persons, loaded.persons):
            assert pa.labels == pb.labels
            for sa, sb in zip(pa.sequences, pb.sequences):
                assert (sa.vas, sa.opi) == (sb.vas, sb.opi)
                np.testing.assert_array_equal(sa.pspi, sb.pspi)
                assert sa.au is not None
                np.testing.assert_array_equal(sa.au, sb.au)
                np.testing.assert_allclose(sb.frames, sa.frames, rtol=1e-8)

    def test_vas_out_of_range(self, tmp_path):
        manifest = save_cohort(_small_cohort(), str(tmp_path))
        with open(manifest) as f:
            entries = json.load(f)
        entries[1]['sequences'][0]['vas'] = 11
        with open(manifest, 'w') as f:
            json.dump(entries, f)
        with pytest.raises(CohortError, match=r"label out of range.*vas=11") as err:
            load_cohort(manifest)
        assert entries[1]['sequences'][0]['file'] in str(err.value)

    def test_dimension_mismatch(self, tmp_path):
        cohort = _small_cohort(n_persons=1, T=8)
        manifest = save_cohort(cohort, str(tmp_path))
        path = os.path.join(str(tmp_path), json.load(open(manifest))[0]['sequences'][0]['file'])
        df = pd.read_csv(path)
        df.loc[4, 'y66'] = np.nan
        df.to_csv(path, index=False)
        with pytest.raises(CohortError, match=r"dimension mismatch at frame 5: 131 landmark values, expected 132"):
            load_cohort(manifest)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CohortError):
            load_cohort(str(tmp_path / 'absent.json'))


class TestSplit:
    def test_paper_sized_split(self):
        cohort = _small_cohort(n_persons=25)
        train, test = split_subject_independent(cohort, 15, seed=3)
        assert len(train.persons) == 15 and len(test.persons) == 10
        assert not set(train.person_ids()) & set(test.person_ids())
        assert sorted(train.person_ids() + test.person_ids()) == sorted(cohort.person_ids())

    def test_two_persons(self):
        train, test = split_subject_independent(_small_cohort(), 1, seed=0)
        assert len(train.persons) == 1 and len(test.persons) == 1

    def test_deterministic(self):
        cohort = _small_cohort(n_persons=10)
        first = split_subject_independent(cohort, 6, seed=11)
        second = split_subject_independent(cohort, 6, seed=11)
        assert first[0].person_ids() == second[0].person_ids()
        assert first[1].person_ids() == second[1].person_ids()

    @pytest.mark.parametrize("n_train", [0, 2])
    def test_invalid_n_train(self, n_train):
        with pytest.raises(CohortError):
            split_subject_independent(_small_cohort(), n_train, seed=0)


class TestSynthetic:
    def test_default_sized_cohort(self):
        cfg = SyntheticConfig(n_landmarks=10)
        cohort = generate_synthetic_cohort(cfg, seed=1)
        assert len(cohort.persons) == 25
        for person in cohort.persons:
            assert len(person.sequences) == 8
            for record in person.sequences:
                assert 60 <= record.length <= 120
                assert 0 <= record.vas <= 10 and 0 <= record.opi <= 5
                assert record.pspi.min() >= 0 and record.pspi.max() <= 16
                assert check_pspi_consistency(record)

    def test_same_seed_identical(self):
        cfg = SyntheticConfig(n_persons=3, sequences_per_person=2, n_landmarks=5)
        _assert_same_cohort(generate_synthetic_cohort(cfg, 5), generate_synthetic_cohort(cfg, 5))

    def test_unit_expressiveness_reports_agree(self):
        cfg = SyntheticConfig(n_persons=1, sequences_per_person=30, noise=0.0, au_noise=0.0,
                              expressiveness=[1.0], n_landmarks=5)
        person = generate_synthetic_cohort(cfg, 2).persons[0]
        for opi, vas in person.labels:
            assert abs(2 * opi - vas) <= 1

    def test_ifes_tracks_expressiveness(self):
        cfg = SyntheticConfig(n_landmarks=5, t_min=20, t_max=30)
        cohort = generate_synthetic_cohort(cfg, 4)
        factors = expressiveness_factors(cfg, 4)
        ifes = [compute_ifes(p.labels, len(p.sequences)).p for p in cohort.persons]
        assert np.corrcoef(factors, ifes)[0, 1] > 0.7

    def test_invalid_config(self):
        with pytest.raises(CohortError):
            generate_synthetic_cohort(SyntheticConfig(t_min=10, t_max=5), 0)

    def test_records_are_read_only(self):
        record = _small_cohort().sequences()[0]
        assert isinstance(record, SequenceRecord)
        with pytest.raises(ValueError):
            record.frames[0, 0] = 1.0


if __name__ == "__main__":
    pytest.main([__file__])
