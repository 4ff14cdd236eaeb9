"""
Landmark normalisation, PCA reduction and neutral-frame balancing
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import eigh

from utils import setup_logging, save_data, load_data, encode_array, decode_array

logger = setup_logging(__name__)


class FeatureError(ValueError):
    """Raised for degenerate frames and dimension mismatches"""


def normalize_landmarks(frames: np.ndarray) -> np.ndarray:
    """
    Centre each frame on the landmark centroid and scale it to unit RMS distance.

    Frames are laid out as x1..xN followed by y1..yN.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    T, D = frames.shape
    if T < 1 or D % 2:
        raise FeatureError(f"expected T >= 1 frames with an even dimension, got {frames.shape}")
    n = D // 2
    xs = frames[:, :n] - frames[:, :n].mean(axis=1, keepdims=True)
    ys = frames[:, n:] - frames[:, n:].mean(axis=1, keepdims=True)
    rms = np.sqrt(np.mean(xs ** 2 + ys ** 2, axis=1, keepdims=True))
    if np.any(rms <= 1e-12):
        bad = int(np.argmax(rms.ravel() <= 1e-12))
        raise FeatureError(f"degenerate frame {bad}: all landmarks coincide")
    return np.hstack([xs / rms, ys / rms])


@dataclass(frozen=True, eq=False)
class PCAModel:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance_ratio: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return int(self.basis.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.mean.shape[0])


def fit_pca(frames: np.ndarray, variance_target: float = 0.95) -> PCAModel:
    """PCA on the sample covariance (divisor n-1), keeping the fewest components reaching the target."""
    X = np.asarray(frames, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise FeatureError(f"PCA needs at least 2 frames, got shape {X.shape}")
    if not 0 < variance_target <= 1:
        raise FeatureError(f"variance_target must lie in (0, 1], got {variance_target}")

    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    eigvals, eigvecs = eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    total = eigvals.sum()
    if total <= 0:
        raise FeatureError("PCA input has zero variance")
    ratios = eigvals / total
    nonzero = int(np.sum(eigvals > eigvals[0] * 1e-12))
    n_components = int(np.searchsorted(np.cumsum(ratios), variance_target - 1e-12) + 1)
    n_components = min(n_components, nonzero)

    basis = eigvecs[:, :n_components].T.copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0

    logger.info(f"PCA kept {n_components} of {X.shape[1]} components "
                f"({np.cumsum(ratios)[n_components - 1]:.4f} of the variance)")
    return PCAModel(mean=mean, basis=basis, explained_variance_ratio=ratios[:n_components],
                    explained_variance=eigvals[:n_components])


def project(model: PCAModel, frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (model.input_dim,):
        raise FeatureError(f"frame dimension {frame.shape}, expected ({model.input_dim},)")
    return model.basis @ (frame - model.mean)


def project_frames(model: PCAModel, frames: np.ndarray) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    if frames.shape[1] != model.input_dim:
        raise FeatureError(f"frame dimension {frames.shape[1]}, expected {model.input_dim}")
    return (frames - model.mean) @ model.basis.T


def save_pca(model: PCAModel, filename: str):
    save_data({
        'mean': encode_array(model.mean),
        'basis': encode_array(model.basis),
        'explained_variance_ratio': encode_array(model.explained_variance_ratio),
        'explained_variance': encode_array(model.explained_variance),
    }, filename)


def load_pca(filename: str) -> PCAModel:
    payload = load_data(filename)
    return PCAModel(**{key: decode_array(value) for key, value in payload.items()})


def _distance_to_pain(pspi: np.ndarray) -> np.ndarray:
    """Per-frame distance to the nearest frame with PSPI >= 1 (inf when there is none)."""
    active = np.flatnonzero(pspi > 0)
    positions = np.arange(len(pspi))
    if active.size == 0:
        return np.full(len(pspi), np.inf)
    return np.min(np.abs(positions[:, None] - active[None, :]), axis=1).astype(float)


def balance_training_frames(sequences: Sequence) -> List[np.ndarray]:
    """
    Retained frame indices per sequence.

    Neutral frames (PSPI = 0) are kept only up to the number of PSPI = 1 frames; those
    farthest from any pain frame are dropped first, and among equally distant frames
    the earlier one (by sequence, then by frame) is kept. Frames with PSPI >= 1 are
    always kept.
    """
    if not sequences:
        return []
    pspis = [np.asarray(s.pspi, dtype=int) for s in sequences]
    n_ones = sum(int(np.sum(p == 1)) for p in pspis)

    candidates = []
    for seq_idx, p in enumerate(pspis):
        dist = _distance_to_pain(p)
        for frame_idx in np.flatnonzero(p == 0):
            candidates.append((dist[frame_idx], seq_idx, int(frame_idx)))
    candidates.sort()
    kept_neutral = candidates[:n_ones]

    retained = [set(np.flatnonzero(p > 0).tolist()) for p in pspis]
    for _, seq_idx, frame_idx in kept_neutral:
        retained[seq_idx].add(frame_idx)

    n_neutral = len(candidates)
    logger.info(f"Balanced training frames: kept {len(kept_neutral)} of {n_neutral} neutral frames "
                f"({n_ones} frames with PSPI=1)")
    return [np.array(sorted(r), dtype=int) for r in retained]


class FeaturePipeline:
    """Landmark normalisation followed by a PCA fitted on the training split."""

    def __init__(self, pca: Optional[PCAModel] = None):
        self.pca = pca

    def fit(self, sequences: Sequence, variance_target: float = 0.95) -> 'FeaturePipeline':
        stacked = np.vstack([normalize_landmarks(s.frames) for s in sequences])
        self.pca = fit_pca(stacked, variance_target)
        return self

    def transform_frames(self, frames: np.ndarray) -> np.ndarray:
        if self.pca is None:
            raise FeatureError("feature pipeline used before fit")
        return project_frames(self.pca, normalize_landmarks(frames))

    def transform_sequence(self, record) -> np.ndarray:
        return self.transform_frames(record.frames)

    @property
    def output_dim(self) -> int:
        return self.pca.n_components
