"""
Individual Facial Expressiveness Score (I-FES) and personalised HCRF features
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from utils import setup_logging

logger = setup_logging(__name__)


@dataclass(frozen=True)
class IFESScore:
    person_id: str
    p: float
    alpha_used: int

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError(f"I-FES must be positive, got {self.p}")
        if self.alpha_used == 0 and self.p != 1.0:
            raise ValueError("I-FES computed from no sequences must be 1")


def _select(n_pairs: int, alpha: int, seed: int) -> np.ndarray:
    if alpha == n_pairs:
        return np.arange(n_pairs)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_pairs, size=alpha, replace=False))


def compute_ifes(pairs: Sequence[Tuple[int, int]], alpha: int, seed: int = 0,
                 person_id: str = '') -> IFESScore:
    """Mean of (opi + 1) / (vas + 1) over alpha randomly chosen (opi, vas) pairs; 1 when alpha is 0."""
    score, _ = compute_ifes_with_selection(pairs, alpha, seed, person_id)
    return score


def compute_ifes_with_selection(pairs: Sequence[Tuple[int, int]], alpha: int, seed: int = 0,
                                person_id: str = '') -> Tuple[IFESScore, List[int]]:
    """As compute_ifes, also returning the indices of the pairs that were used."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if alpha > len(pairs):
        raise ValueError(f"alpha={alpha} exceeds the {len(pairs)} available sequences of '{person_id}'")
    for opi, vas in pairs:
        if not (0 <= opi <= 5 and 0 <= vas <= 10):
            raise ValueError(f"invalid (opi, vas) pair ({opi}, {vas})")
    if alpha == 0:
        return IFESScore(person_id, 1.0, 0), []

    chosen = _select(len(pairs), alpha, seed)
    ratios = [(pairs[k][0] + 1.0) / (pairs[k][1] + 1.0) for k in chosen]
    return IFESScore(person_id, float(np.mean(ratios)), alpha), chosen.tolist()


def compute_person_ifes(person, alpha: int, seed: int = 0) -> Tuple[IFESScore, List[int]]:
    """I-FES of a PersonRecord and the sequence indices consumed to estimate it."""
    return compute_ifes_with_selection(person.labels, alpha, seed, person.person_id)


def augment_features(per_frame: np.ndarray, p: float) -> np.ndarray:
    """Append the constant I-FES as an extra column to every frame."""
    per_frame = np.asarray(per_frame, dtype=float)
    if per_frame.ndim == 1:
        per_frame = per_frame[:, None]
    return np.hstack([per_frame, np.full((per_frame.shape[0], 1), float(p))])


def strip_personalization(features: np.ndarray) -> np.ndarray:
    return np.asarray(features)[:, :-1]
