"""
Tests for PSPI computation and scaling
"""
import itertools

import numpy as np
import pytest

from data import AUVector
from pspi import PSPI_MAX, compute_pspi, pspi_from_matrix, scale_pspi, scale_pspi_array


def test_compute_pspi_examples():
    assert compute_pspi(AUVector(0, 0, 0, 0, 0, 0)) == 0
    assert compute_pspi(AUVector(4, 3, 5, 1, 2, 1)) == 12
    assert compute_pspi(AUVector(5, 5, 5, 5, 5, 1)) == 16


def test_compute_pspi_exhaustive():
    grid = list(itertools.product(range(6), range(6), range(6), range(6), range(6), range(2)))
    assert len(grid) == 15552
    observed = []
    for au4, au6, au7, au9, au10, au43 in grid:
        oracle = au4 + (au6 if au6 > au7 else au7) + (au9 if au9 > au10 else au10) + au43
        value = compute_pspi(AUVector(au4, au6, au7, au9, au10, au43))
        assert value == oracle
        observed.append(value)
    assert min(observed) == 0
    assert max(observed) == PSPI_MAX
    np.testing.assert_array_equal(pspi_from_matrix(np.array(grid)), observed)


@pytest.mark.parametrize("row", [(6, 0, 0, 0, 0, 0), (0, -1, 0, 0, 0, 0), (0, 0, 0, 0, 0, 2)])
def test_au_vector_rejects_out_of_range(row):
    with pytest.raises(ValueError):
        AUVector(*row)


def test_scale_pspi_examples():
    assert scale_pspi(0) == 0.0
    assert scale_pspi(15, max_pspi=15) == 1.0
    assert scale_pspi(12, max_pspi=16) == 0.75


def test_scale_pspi_errors():
    with pytest.raises(ValueError):
        scale_pspi(16, max_pspi=15)
    with pytest.raises(ValueError):
        scale_pspi(3, max_pspi=10)
    with pytest.raises(ValueError):
        scale_pspi_array(np.array([0, 17]))


def test_scale_pspi_array_matches_scalar():
    values = np.arange(17)
    np.testing.assert_allclose(scale_pspi_array(values), [scale_pspi(int(v)) for v in values])


if __name__ == "__main__":
    pytest.main([__file__])
