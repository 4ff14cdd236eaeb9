"""
Cohort data model: loading, saving, subject-independent splits and synthetic cohorts
"""
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pspi import PSPI_MAX, compute_pspi, pspi_from_matrix
from utils import setup_logging, save_data, load_data

logger = setup_logging(__name__)

AU_COLUMNS = ['au4', 'au6', 'au7', 'au9', 'au10', 'au43']
VAS_RANGE = (0, 10)
OPI_RANGE = (0, 5)
FLOAT_FORMAT = '%.9g'


class CohortError(ValueError):
    """Raised when a cohort, its files or its generation config are invalid"""


@dataclass(frozen=True)
class AUVector:
    au4: int
    au6: int
    au7: int
    au9: int
    au10: int
    au43: int

    def __post_init__(self):
        for name in AU_COLUMNS[:-1]:
            value = getattr(self, name)
            if not 0 <= value <= 5:
                raise ValueError(f"{name}={value} outside [0, 5]")
        if self.au43 not in (0, 1):
            raise ValueError(f"au43={self.au43} must be 0 or 1")

    @classmethod
    def from_row(cls, row: Sequence[int]) -> 'AUVector':
        return cls(*(int(v) for v in row))

    def as_tuple(self) -> Tuple[int, ...]:
        return (self.au4, self.au6, self.au7, self.au9, self.au10, self.au43)


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    """One video: T frames of D features, per-frame PSPI and sequence labels."""
    frames: np.ndarray
    pspi: np.ndarray
    vas: int
    opi: int
    au: Optional[np.ndarray] = None
    name: str = ''

    def __post_init__(self):
        for attr in ('frames', 'pspi', 'au'):
            value = getattr(self, attr)
            if value is not None:
                value = np.array(value, dtype=float if attr == 'frames' else int)
                value.setflags(write=False)
                object.__setattr__(self, attr, value)

    @property
    def length(self) -> int:
        return int(self.frames.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frames.shape[1])

    def au_vectors(self) -> List[AUVector]:
        if self.au is None:
            return []
        return [AUVector.from_row(row) for row in self.au]


@dataclass(frozen=True)
class PersonRecord:
    person_id: str
    sequences: Tuple[SequenceRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, 'sequences', tuple(self.sequences))

    @property
    def labels(self) -> List[Tuple[int, int]]:
        """(opi, vas) pairs in sequence order."""
        return [(s.opi, s.vas) for s in self.sequences]


@dataclass(frozen=True)
class Cohort:
    persons: Tuple[PersonRecord, ...]
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, 'persons', tuple(self.persons))

    def person_ids(self) -> List[str]:
        return [p.person_id for p in self.persons]

    def n_sequences(self) -> int:
        return sum(len(p.sequences) for p in self.persons)

    def subset(self, person_ids: Sequence[str]) -> 'Cohort':
        wanted = set(person_ids)
        return Cohort(tuple(p for p in self.persons if p.person_id in wanted), self.feature_dim)

    def sequences(self) -> List[SequenceRecord]:
        return [s for p in self.persons for s in p.sequences]


def validate_sequence(record: SequenceRecord, person_id: str, feature_dim: int,
                      max_pspi: int = PSPI_MAX):
    """Check every SequenceRecord invariant, naming the person and sequence on failure."""
    where = f"person '{person_id}', sequence '{record.name}'"
    if record.frames.ndim != 2 or record.length < 1:
        raise CohortError(f"{where}: empty sequence")
    if record.feature_dim != feature_dim:
        raise CohortError(f"{where}: feature dimension {record.feature_dim}, expected {feature_dim}")
    if not np.all(np.isfinite(record.frames)):
        raise CohortError(f"{where}: non-finite feature values")
    if record.pspi.shape != (record.length,):
        raise CohortError(f"{where}: {record.pspi.size} PSPI labels for {record.length} frames")
    if record.pspi.min() < 0 or record.pspi.max() > max_pspi:
        raise CohortError(f"{where}: PSPI outside [0, {max_pspi}]")
    if not VAS_RANGE[0] <= record.vas <= VAS_RANGE[1]:
        raise CohortError(f"{where}: label out of range, vas={record.vas}")
    if not OPI_RANGE[0] <= record.opi <= OPI_RANGE[1]:
        raise CohortError(f"{where}: label out of range, opi={record.opi}")
    if record.au is not None:
        if record.au.shape != (record.length, len(AU_COLUMNS)):
            raise CohortError(f"{where}: AU matrix shape {record.au.shape}")
        if record.au[:, :5].min() < 0 or record.au[:, :5].max() > 5 or not np.isin(record.au[:, 5], (0, 1)).all():
            raise CohortError(f"{where}: AU intensity out of range")


def _landmark_columns(n_points: int) -> List[str]:
    return [f'x{i}' for i in range(1, n_points + 1)] + [f'y{i}' for i in range(1, n_points + 1)]


def _read_sequence_file(path: str, person_id: str, vas: int, opi: int) -> SequenceRecord:
    name = os.path.basename(path)
    where = f"person '{person_id}', sequence '{name}'"
    if not os.path.exists(path):
        raise CohortError(f"{where}: missing file {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CohortError(f"{where}: unreadable CSV ({e})") from e

    xs = [c for c in df.columns if c.startswith('x')]
    n_points = len(xs)
    columns = _landmark_columns(n_points)
    missing = [c for c in columns + ['pspi'] if c not in df.columns]
    if n_points == 0 or missing:
        raise CohortError(f"{where}: header lacks columns {missing or ['x1']}")
    if df.empty:
        raise CohortError(f"{where}: empty sequence")

    has_au = all(c in df.columns for c in AU_COLUMNS)
    expected = columns + ['pspi'] + (AU_COLUMNS if has_au else [])
    incomplete = df[expected].isna().any(axis=1).to_numpy()
    if incomplete.any():
        frame = int(np.argmax(incomplete))
        found = int(df[expected].iloc[frame].notna().sum()) - 1 - (len(AU_COLUMNS) if has_au else 0)
        raise CohortError(f"{where}: dimension mismatch at frame {frame + 1}: "
                          f"{found} landmark values, expected {2 * n_points}")

    pspi = df['pspi'].to_numpy()
    if not np.all(pspi == np.round(pspi)):
        raise CohortError(f"{where}: non-integer PSPI values")
    au = df[AU_COLUMNS].to_numpy().astype(int) if has_au else None
    return SequenceRecord(frames=df[columns].to_numpy(dtype=float), pspi=pspi.astype(int),
                          vas=int(vas), opi=int(opi), au=au, name=name)


def load_cohort(manifest_path: str, max_pspi: int = PSPI_MAX) -> Cohort:
    """Load and validate a cohort from a JSON manifest and its per-sequence CSV files."""
    if not os.path.exists(manifest_path):
        raise CohortError(f"missing manifest {manifest_path}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    entries = load_data(manifest_path)
    if not isinstance(entries, list) or not entries:
        raise CohortError(f"{manifest_path}: manifest must be a non-empty list of persons")

    persons = []
    feature_dim = None
    for entry in entries:
        person_id = str(entry['person_id'])
        if not entry.get('sequences'):
            raise CohortError(f"person '{person_id}': no sequences")
        records = []
        for seq in entry['sequences']:
            where = f"person '{person_id}', sequence '{seq.get('file')}'"
            for key in ('vas', 'opi'):
                if int(seq[key]) != seq[key]:
                    raise CohortError(f"{where}: non-integer {key}")
            vas, opi = int(seq['vas']), int(seq['opi'])
            if not VAS_RANGE[0] <= vas <= VAS_RANGE[1]:
                raise CohortError(f"{where}: label out of range, vas={vas}")
            if not OPI_RANGE[0] <= opi <= OPI_RANGE[1]:
                raise CohortError(f"{where}: label out of range, opi={opi}")
            record = _read_sequence_file(os.path.join(root, seq['file']), person_id, vas, opi)
            record = SequenceRecord(record.frames, record.pspi, vas, opi, record.au, seq['file'])
            if feature_dim is None:
                feature_dim = record.feature_dim
            validate_sequence(record, person_id, feature_dim, max_pspi)
            records.append(record)
        persons.append(PersonRecord(person_id, tuple(records)))

    cohort = Cohort(tuple(persons), int(feature_dim))
    logger.info(f"Loaded cohort from {manifest_path}: {len(persons)} persons, "
                f"{cohort.n_sequences()} sequences, D={feature_dim}")
    return cohort


def save_cohort(cohort: Cohort, directory: str) -> str:
    """Write the cohort in the manifest + CSV format; returns the manifest path."""
    seq_dir = os.path.join(directory, 'sequences')
    os.makedirs(seq_dir, exist_ok=True)
    manifest = []
    for person in cohort.persons:
        entries = []
        for j, record in enumerate(person.sequences):
            rel = os.path.join('sequences', f"{person.person_id}_{j:03d}.csv")
            n_points = record.feature_dim // 2
            df = pd.DataFrame(record.frames, columns=_landmark_columns(n_points))
            df['pspi'] = record.pspi
            if record.au is not None:
                for k, col in enumerate(AU_COLUMNS):
                    df[col] = record.au[:, k]
            df.to_csv(os.path.join(directory, rel), index=False, float_format=FLOAT_FORMAT)
            entries.append({'file': rel, 'vas': int(record.vas), 'opi': int(record.opi)})
        manifest.append({'person_id': person.person_id, 'sequences': entries})
    manifest_path = os.path.join(directory, 'manifest.json')
    save_data(manifest, manifest_path)
    logger.info(f"Saved cohort with {len(manifest)} persons to {manifest_path}")
    return manifest_path


def split_subject_independent(cohort: Cohort, n_train: int, seed: int) -> Tuple[Cohort, Cohort]:
    """Random disjoint person-level partition; input order is preserved inside each part."""
    n = len(cohort.persons)
    if not 1 <= n_train < n:
        raise CohortError(f"n_train must lie in [1, {n - 1}], got {n_train}")
    order = np.random.default_rng(seed).permutation(n)
    train_idx = set(order[:n_train].tolist())
    train = tuple(p for i, p in enumerate(cohort.persons) if i in train_idx)
    test = tuple(p for i, p in enumerate(cohort.persons) if i not in train_idx)
    return Cohort(train, cohort.feature_dim), Cohort(test, cohort.feature_dim)


@dataclass
class SyntheticConfig:
    n_persons: int = 25
    sequences_per_person: int = 8
    t_min: int = 60
    t_max: int = 120
    noise: float = 0.01
    au_noise: float = 0.2
    expressiveness_range: Tuple[float, float] = (0.5, 2.0)
    expressiveness: Optional[List[float]] = None
    pain_range: Tuple[float, float] = (0.0, 1.0)
    identity_scale: float = 0.02
    n_landmarks: int = 66
    au_gains: List[float] = field(default_factory=lambda: [1.0, 0.9, 0.8, 0.6, 0.7])

    def validate(self):
        if self.n_persons < 1:
            raise CohortError("synthetic config needs at least one person")
        if self.sequences_per_person < 1:
            raise CohortError("synthetic config needs at least one sequence per person")
        if self.t_min < 1 or self.t_max < self.t_min:
            raise CohortError(f"invalid length range [{self.t_min}, {self.t_max}]")
        if self.noise < 0 or self.au_noise < 0:
            raise CohortError("noise levels must be non-negative")
        lo, hi = self.expressiveness_range
        if not 0 < lo <= hi:
            raise CohortError(f"invalid expressiveness range {self.expressiveness_range}")
        if self.expressiveness is not None:
            if len(self.expressiveness) != self.n_persons or min(self.expressiveness) <= 0:
                raise CohortError("expressiveness needs one positive factor per person")
        if not 0 <= self.pain_range[0] <= self.pain_range[1] <= 1:
            raise CohortError(f"invalid latent pain range {self.pain_range}")


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(int)


def generate_synthetic_cohort(cfg: SyntheticConfig, seed: int) -> Cohort:
    """
    Cohort whose self-reports are biased per person.

    Each person has an expressiveness factor e. A sequence has a latent peak pain L:
    AU intensities follow a smooth onset/offset bump of height 5 * e * L, PSPI derives
    from the AUs, landmarks are a fixed linear map of the AUs plus noise, VAS is L on
    the 0-10 scale and OPI is e * L on the 0-5 scale.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    dim = 2 * cfg.n_landmarks
    template = rng.normal(size=dim)
    au_map = rng.normal(scale=0.05, size=(len(AU_COLUMNS), dim))
    gains = np.asarray(cfg.au_gains, dtype=float)

    if cfg.expressiveness is not None:
        factors = np.asarray(cfg.expressiveness, dtype=float)
    else:
        factors = rng.uniform(*cfg.expressiveness_range, size=cfg.n_persons)

    persons = []
    for i in range(cfg.n_persons):
        e = float(factors[i])
        identity = rng.normal(scale=cfg.identity_scale, size=dim)
        records = []
        for j in range(cfg.sequences_per_person):
            T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            peak = float(rng.uniform(*cfg.pain_range))
            centre = rng.uniform(0.3, 0.7) * T
            width = max(rng.uniform(0.1, 0.25) * T, 1.0)
            bump = np.exp(-0.5 * ((np.arange(T) - centre) / width) ** 2)

            drive = e * peak * bump
            graded = 5.0 * drive[:, None] * gains[None, :] + rng.normal(scale=cfg.au_noise, size=(T, 5))
            graded = np.clip(_round_half_up(graded), 0, 5)
            closure = (drive > 0.6).astype(int)
            au = np.column_stack([graded, closure])

            frames = template + identity + au @ au_map + rng.normal(scale=cfg.noise, size=(T, dim))
            vas = int(np.clip(_round_half_up(10.0 * peak), *VAS_RANGE))
            opi = int(np.clip(_round_half_up(np.clip(5.0 * e * peak, 0.0, 5.0)), *OPI_RANGE))
            records.append(SequenceRecord(frames=frames, pspi=pspi_from_matrix(au), vas=vas, opi=opi,
                                          au=au, name=f"synthetic_{i:02d}_{j:03d}"))
        persons.append(PersonRecord(f"S{i:02d}", tuple(records)))

    logger.info(f"Generated synthetic cohort: {cfg.n_persons} persons x {cfg.sequences_per_person} sequences "
                f"(seed={seed})")
    return Cohort(tuple(persons), dim)


def expressiveness_factors(cfg: SyntheticConfig, seed: int) -> np.ndarray:
    """The per-person factors generate_synthetic_cohort draws for (cfg, seed)."""
    if cfg.expressiveness is not None:
        return np.asarray(cfg.expressiveness, dtype=float)
    rng = np.random.default_rng(seed)
    dim = 2 * cfg.n_landmarks
    rng.normal(size=dim)
    rng.normal(size=(len(AU_COLUMNS), dim))
    return rng.uniform(*cfg.expressiveness_range, size=cfg.n_persons)


def check_pspi_consistency(record: SequenceRecord) -> bool:
    """True when every frame's PSPI equals compute_pspi of its AU vector."""
    if record.au is None:
        return False
    return all(compute_pspi(au) == int(s) for au, s in zip(record.au_vectors(), record.pspi))
