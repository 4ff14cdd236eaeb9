"""
Prkachin-Solomon Pain Intensity (PSPI) from facial action-unit intensities.

The formula AU4 + max(AU6, AU7) + max(AU9, AU10) + AU43 peaks at 16 because AU43
(eye closure) is binary, although the scale is usually quoted as 0-15. The scaling
denominator is therefore configurable (15 or 16, default 16) so users can match the
convention of their data.
"""
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from data import AUVector

PSPI_MAX = 16
SUPPORTED_MAX_PSPI = (15, 16)


def compute_pspi(au: 'AUVector') -> int:
    """PSPI of a single frame."""
    return au.au4 + max(au.au6, au.au7) + max(au.au9, au.au10) + au.au43


def pspi_from_matrix(aus: np.ndarray) -> np.ndarray:
    """Vectorised PSPI for a T x 6 matrix with columns au4, au6, au7, au9, au10, au43."""
    aus = np.asarray(aus, dtype=int)
    return aus[:, 0] + np.maximum(aus[:, 1], aus[:, 2]) + np.maximum(aus[:, 3], aus[:, 4]) + aus[:, 5]


def scale_pspi(s: int, max_pspi: int = PSPI_MAX) -> float:
    """Map an integer PSPI onto [0, 1] as a regression target."""
    if max_pspi not in SUPPORTED_MAX_PSPI:
        raise ValueError(f"max_pspi must be one of {SUPPORTED_MAX_PSPI}, got {max_pspi}")
    if not 0 <= s <= max_pspi:
        raise ValueError(f"PSPI {s} outside [0, {max_pspi}]")
    return s / max_pspi


def scale_pspi_array(values: np.ndarray, max_pspi: int = PSPI_MAX) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if max_pspi not in SUPPORTED_MAX_PSPI:
        raise ValueError(f"max_pspi must be one of {SUPPORTED_MAX_PSPI}, got {max_pspi}")
    if values.size and (values.min() < 0 or values.max() > max_pspi):
        raise ValueError(f"PSPI values outside [0, {max_pspi}]")
    return values / max_pspi
