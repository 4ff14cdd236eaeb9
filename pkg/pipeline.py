"""
End-to-end personalised pain pipeline: first-stage PSPI estimation, I-FES
personalisation, HCRF training, inference and the alpha-sweep experiment
"""
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from data import Cohort, PersonRecord, SequenceRecord, SyntheticConfig, generate_synthetic_cohort, \
    load_cohort, split_subject_independent
from features import FeaturePipeline, balance_training_frames, load_pca, save_pca
from hcrf import HCRFModel, HCRFTrainConfig, add_bias, load_hcrf, predict_vas, save_hcrf, select_lambda, \
    train_hcrf
from metrics import EvalReport, confusion_to_frame, evaluate, per_person_mae
from optim import LBFGSConfig, save_trace_csv
from personalization import augment_features, compute_ifes, compute_person_ifes
from pspi import scale_pspi_array
from regressor import BiLSTMRegressor, FeedforwardBaseline, RegressorConfig, build_training_windows, \
    load_regressor, predict_sequence, predict_sequence_ffn, save_regressor, train_ffn, train_regressor
from utils import setup_logging, get_config, validate_config, save_data, load_data, format_timestamp

logger = setup_logging(__name__)

FIRST_STAGES = ('bilstm', 'ffn', 'gt-pspi', 'raw')
STAGE_ALIASES = {'ground-truth-pspi': 'gt-pspi', 'raw-features': 'raw'}
VAS_LEVELS = 11


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage it happened in"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    logger.debug(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise StageError(name, str(e)) from e


def canonical_stage(name: str) -> str:
    name = STAGE_ALIASES.get(name, name)
    if name not in FIRST_STAGES:
        raise ValueError(f"unknown first stage '{name}', expected one of {FIRST_STAGES}")
    return name


@dataclass
class HCRFSettings:
    lam: float = 1.0
    lambda_grid: List[float] = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    n_states: int = 11
    init_scale: float = 0.1
    max_iterations: int = 200
    n_workers: int = 1

    def train_config(self, seed: int, lam: Optional[float] = None) -> HCRFTrainConfig:
        return HCRFTrainConfig(n_classes=VAS_LEVELS, n_states=self.n_states,
                               lam=self.lam if lam is None else lam, init_scale=self.init_scale, seed=seed,
                               lbfgs=LBFGSConfig(max_iterations=self.max_iterations, function_tolerance=1e-9),
                               n_workers=self.n_workers)


@dataclass
class ExperimentConfig:
    manifest: Optional[str] = None
    synthetic: Dict[str, Any] = field(default_factory=dict)
    cohort_seed: int = 0
    n_train: int = 15
    split_seed: int = 0
    first_stage: str = 'bilstm'
    alphas: List[int] = field(default_factory=lambda: [0, 1, 2])
    repetitions: int = 5
    seed: int = 0
    max_pspi: int = 16
    variance_target: float = 0.95
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    hcrf: HCRFSettings = field(default_factory=HCRFSettings)
    output_dir: str = 'runs'

    def __post_init__(self):
        if isinstance(self.regressor, dict):
            self.regressor = RegressorConfig(**self.regressor)
        if isinstance(self.hcrf, dict):
            self.hcrf = HCRFSettings(**self.hcrf)
        self.first_stage = canonical_stage(self.first_stage)

    def validate(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if any(a < 0 for a in self.alphas):
            raise ValueError(f"alphas must be non-negative, got {self.alphas}")
        if self.n_train < 1:
            raise ValueError(f"n_train must be >= 1, got {self.n_train}")

    @classmethod
    def from_env(cls, **overrides) -> 'ExperimentConfig':
        env = get_config()
        if not validate_config(env):
            raise ValueError("Invalid configuration")
        base = cls(
            seed=env['seed'], max_pspi=env['max_pspi'], variance_target=env['variance_target'],
            output_dir=env['output_dir'],
            regressor=RegressorConfig(hidden_size=env['hidden_size'], head_units=env['head_units'],
                                      epochs=env['epochs'], batch_size=env['batch_size'],
                                      learning_rate=env['learning_rate'], show_progress=env['show_progress']),
            hcrf=HCRFSettings(lam=env['hcrf_lambda'], n_states=env['hcrf_states'],
                              max_iterations=env['lbfgs_max_iter']),
        )
        return base.merged(overrides)

    def merged(self, overrides: Dict[str, Any]) -> 'ExperimentConfig':
        """Copy with overrides; nested regressor/hcrf dicts update field by field."""
        current = self.to_dict()
        for key, value in overrides.items():
            if key not in current:
                raise ValueError(f"unknown configuration key '{key}'")
            if key in ('regressor', 'hcrf', 'synthetic') and isinstance(value, dict):
                current[key] = {**current[key], **value}
            else:
                current[key] = value
        return ExperimentConfig(**current)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def load(cls, path: str) -> 'ExperimentConfig':
        """Read an ExperimentConfig JSON, or the config recorded in a run manifest."""
        payload = load_data(path)
        if 'config' in payload and 'seeds' in payload:
            payload = payload['config']
        return cls.from_env().merged(payload)

    def seeds(self) -> Dict[str, Any]:
        return {'cohort': self.cohort_seed, 'split': self.split_seed, 'base': self.seed,
                'regressor_init': self.seed, 'regressor_shuffle': self.seed + 1, 'hcrf': self.seed + 2,
                'repetitions': [self.seed + r for r in range(1, self.repetitions + 1)]}


@dataclass
class Artifacts:
    first_stage: str
    features: FeaturePipeline
    hcrf: HCRFModel
    train_ifes: Dict[str, float]
    max_pspi: int = 16
    regressor: Any = None
    lam: float = 1.0
    regressor_history: List[float] = field(default_factory=list)
    hcrf_trace: List[Dict[str, float]] = field(default_factory=list)


@dataclass
class PersonInference:
    person_id: str
    ifes: float
    held_out: List[int]
    evaluated: List[int]
    pspi_estimates: List[Optional[np.ndarray]]
    vas_pred: List[int]
    vas_true: List[int]


# ---------------------------------------------------------------- cohorts

def build_cohort(cfg: ExperimentConfig) -> Cohort:
    if cfg.manifest:
        return load_cohort(cfg.manifest, cfg.max_pspi)
    return generate_synthetic_cohort(SyntheticConfig(**cfg.synthetic), cfg.cohort_seed)


def prepare_cohorts(cfg: ExperimentConfig) -> Tuple[Cohort, Cohort]:
    with stage('load'):
        cfg.validate()
        cohort = build_cohort(cfg)
        train, test = split_subject_independent(cohort, cfg.n_train, cfg.split_seed)
        logger.info(f"Split {len(cohort.persons)} persons into {len(train.persons)} train / "
                    f"{len(test.persons)} test")
    return train, test


def cohort_summary(cohort: Cohort) -> Dict[str, Any]:
    """Label histograms and per-person I-FES over all sequences."""
    sequences = cohort.sequences()
    pspi = np.concatenate([s.pspi for s in sequences])
    return {
        'persons': len(cohort.persons),
        'sequences': len(sequences),
        'frames': int(pspi.size),
        'vas_histogram': np.bincount([s.vas for s in sequences], minlength=11).tolist(),
        'opi_histogram': np.bincount([s.opi for s in sequences], minlength=6).tolist(),
        'pspi_histogram': np.bincount(pspi, minlength=17).tolist(),
        'ifes': {p.person_id: compute_ifes(p.labels, len(p.sequences), person_id=p.person_id).p
                 for p in cohort.persons},
    }


# ---------------------------------------------------------------- learning

def _train_first_stage(cfg: ExperimentConfig, features: FeaturePipeline, sequences: Sequence[SequenceRecord]):
    inputs = [features.transform_sequence(s) for s in sequences]
    targets = [scale_pspi_array(s.pspi, cfg.max_pspi) for s in sequences]
    centers = balance_training_frames(sequences)
    if not sum(len(idx) for idx in centers):
        raise ValueError("no training windows: every frame was removed by neutral-frame balancing")
    rcfg = cfg.regressor
    if cfg.first_stage == 'bilstm':
        windows, ys = build_training_windows(inputs, targets, centers, rcfg.window_radius)
        model = BiLSTMRegressor.initialize(features.output_dim, rcfg, cfg.seed)
        return train_regressor(model, windows, ys, rcfg, cfg.seed + 1)
    frames = np.concatenate([x[idx] for x, idx in zip(inputs, centers)])
    ys = np.concatenate([y[idx] for y, idx in zip(targets, centers)])
    model = FeedforwardBaseline.initialize(features.output_dim, rcfg, cfg.seed)
    return train_ffn(model, frames, ys, rcfg, cfg.seed + 1)


def frame_scores(artifacts: Artifacts, record: SequenceRecord) -> np.ndarray:
    """Per-frame first-stage output (T x d) fed to the HCRF before personalisation."""
    if artifacts.first_stage == 'gt-pspi':
        return scale_pspi_array(record.pspi, artifacts.max_pspi)[:, None]
    x = artifacts.features.transform_sequence(record)
    if artifacts.first_stage == 'raw':
        return x
    if artifacts.first_stage == 'bilstm':
        return predict_sequence(artifacts.regressor, x)[:, None]
    return predict_sequence_ffn(artifacts.regressor, x)[:, None]


def hcrf_input(artifacts: Artifacts, record: SequenceRecord, p: float) -> np.ndarray:
    return add_bias(augment_features(frame_scores(artifacts, record), p))


def run_learning(cfg: ExperimentConfig, train: Optional[Cohort] = None) -> Artifacts:
    """Fit features and the first stage, compute training I-FES, then train the personalised HCRF."""
    if train is None:
        train, _ = prepare_cohorts(cfg)
    sequences = train.sequences()

    with stage('features'):
        features = FeaturePipeline().fit(sequences, cfg.variance_target)

    regressor, history = None, []
    if cfg.first_stage in ('bilstm', 'ffn'):
        with stage('regressor'):
            regressor, history = _train_first_stage(cfg, features, sequences)

    with stage('ifes'):
        train_ifes = {p.person_id: compute_ifes(p.labels, len(p.sequences), person_id=p.person_id).p
                      for p in train.persons}

    artifacts = Artifacts(cfg.first_stage, features, HCRFModel.zeros(1, 1, 1), train_ifes, cfg.max_pspi,
                          regressor, cfg.hcrf.lam, history)

    with stage('hcrf'):
        inputs, labels, groups = [], [], []
        for person in train.persons:
            for record in person.sequences:
                inputs.append(hcrf_input(artifacts, record, train_ifes[person.person_id]))
                labels.append(record.vas)
                groups.append(person.person_id)
        lam = select_lambda(inputs, labels, groups, cfg.hcrf.lambda_grid,
                            cfg.hcrf.train_config(cfg.seed + 2), cfg.seed + 2)
        model, result = train_hcrf(inputs, labels, cfg.hcrf.train_config(cfg.seed + 2, lam))
        artifacts.hcrf, artifacts.lam, artifacts.hcrf_trace = model, lam, result.trace
    return artifacts


def save_artifacts(artifacts: Artifacts, directory: str, cfg: Optional[ExperimentConfig] = None):
    with stage('report'):
        os.makedirs(directory, exist_ok=True)
        save_pca(artifacts.features.pca, os.path.join(directory, 'pca.json'))
        if artifacts.regressor is not None:
            save_regressor(artifacts.regressor, os.path.join(directory, 'regressor.json'))
        save_hcrf(artifacts.hcrf, os.path.join(directory, 'hcrf.json'), {'lambda': artifacts.lam})
        save_data({'first_stage': artifacts.first_stage, 'max_pspi': artifacts.max_pspi,
                   'train_ifes': artifacts.train_ifes, 'regressor_history': artifacts.regressor_history},
                  os.path.join(directory, 'artifacts.json'))
        if artifacts.hcrf_trace:
            save_trace_csv(artifacts.hcrf_trace, os.path.join(directory, 'hcrf_trace.csv'))
        if cfg is not None:
            write_manifest(cfg, directory, 'train')


def load_artifacts(directory: str) -> Artifacts:
    with stage('load'):
        meta = load_data(os.path.join(directory, 'artifacts.json'))
        regressor_path = os.path.join(directory, 'regressor.json')
        regressor = load_regressor(regressor_path) if os.path.exists(regressor_path) else None
        hcrf_payload = load_data(os.path.join(directory, 'hcrf.json'))
        return Artifacts(meta['first_stage'], FeaturePipeline(load_pca(os.path.join(directory, 'pca.json'))),
                         load_hcrf(os.path.join(directory, 'hcrf.json')), meta['train_ifes'], meta['max_pspi'],
                         regressor, hcrf_payload.get('lambda', 1.0), meta.get('regressor_history', []))


def write_manifest(cfg: ExperimentConfig, directory: str, command: str, extra: Optional[Dict[str, Any]] = None):
    """Record the command, full configuration and seeds; extra holds command arguments outside the config."""
    payload = {'command': command, 'created': format_timestamp(), 'seeds': cfg.seeds(), 'config': cfg.to_dict()}
    if extra:
        payload.update(extra)
    os.makedirs(directory, exist_ok=True)
    save_data(payload, os.path.join(directory, 'manifest.json'))


# ---------------------------------------------------------------- inference

def person_seed(repetition_seed: int, person_index: int) -> int:
    return int(np.random.SeedSequence([repetition_seed, person_index]).generate_state(1)[0])


def run_inference(artifacts: Artifacts, person: PersonRecord, alpha: int, seed: int) -> PersonInference:
    """Estimate the person's I-FES from alpha held sequences and predict VAS for the rest."""
    with stage('inference'):
        n = len(person.sequences)
        if alpha >= n:
            raise ValueError(f"alpha={alpha} leaves no sequence of '{person.person_id}' to evaluate ({n} available)")
        score, held = compute_person_ifes(person, alpha, seed)
        evaluated = [j for j in range(n) if j not in held]
        estimates, preds, truth = [], [], []
        for j in evaluated:
            record = person.sequences[j]
            scores = frame_scores(artifacts, record)
            estimates.append(scores[:, 0] if artifacts.first_stage != 'raw' else None)
            preds.append(predict_vas(artifacts.hcrf, add_bias(augment_features(scores, score.p))))
            truth.append(record.vas)
        return PersonInference(person.person_id, score.p, held, evaluated, estimates, preds, truth)


def evaluate_pspi_stage(artifacts: Artifacts, test: Cohort) -> EvalReport:
    """Frame-level MAE / ICC of the first stage on the PSPI scale."""
    with stage('evaluate'):
        if artifacts.first_stage == 'raw':
            raise ValueError("the raw-features first stage produces no PSPI estimates")
        pred, truth = [], []
        for record in test.sequences():
            pred.append(frame_scores(artifacts, record)[:, 0] * artifacts.max_pspi)
            truth.append(record.pspi)
        report = evaluate(np.concatenate(pred), np.concatenate(truth), artifacts.max_pspi + 1)
        logger.info(f"PSPI stage ({artifacts.first_stage}): MAE={report.mae:.4f}, ICC={report.icc31}")
        return report


def _cell(artifacts: Artifacts, test: Cohort, alpha: int, repetition: int, rep_seed: int) -> Dict[str, Any]:
    pred, truth, owners, ifes, held, rows, skipped = [], [], [], {}, {}, [], []
    for idx, person in enumerate(test.persons):
        if alpha >= len(person.sequences):
            logger.warning(f"alpha={alpha}: skipping '{person.person_id}' with {len(person.sequences)} sequences")
            skipped.append(person.person_id)
            continue
        result = run_inference(artifacts, person, alpha, person_seed(rep_seed, idx))
        pred.extend(result.vas_pred)
        truth.extend(result.vas_true)
        owners.extend([person.person_id] * len(result.vas_pred))
        ifes[person.person_id] = result.ifes
        held[person.person_id] = result.held_out
        for j, p, t in zip(result.evaluated, result.vas_pred, result.vas_true):
            rows.append({'alpha': alpha, 'repetition': repetition, 'person_id': person.person_id,
                         'sequence': j, 'vas_true': t, 'vas_pred': p})
    if not pred:
        raise ValueError(f"alpha={alpha}: no test sequence left to evaluate")
    report = evaluate(pred, truth, VAS_LEVELS)
    per_person = per_person_mae(pred, truth, owners)
    return {'alpha': alpha, 'repetition': repetition, 'seed': rep_seed, 'mae': report.mae,
            'icc31': report.icc31, 'n': report.n, 'confusion': report.confusion.tolist(),
            'per_person_mae': dict(zip(per_person['person_id'], per_person['mae'].astype(float))),
            'ifes': ifes, 'held_out': held, 'skipped': skipped, 'predictions': rows}


def _mean_std(values: List[Optional[float]]) -> Dict[str, Optional[float]]:
    defined = [v for v in values if v is not None]
    if not defined:
        return {'mean': None, 'std': None}
    return {'mean': float(np.mean(defined)), 'std': float(np.std(defined))}


def run_alpha_experiment(cfg: ExperimentConfig, artifacts: Optional[Artifacts] = None,
                         cohorts: Optional[Tuple[Cohort, Cohort]] = None) -> Dict[str, Any]:
    """Evaluate every (alpha, repetition) cell and summarise across repetitions."""
    train, test = cohorts or prepare_cohorts(cfg)
    if artifacts is None:
        artifacts = run_learning(cfg, train)

    cells = []
    with stage('inference'):
        for alpha in cfg.alphas:
            for r in range(1, cfg.repetitions + 1):
                cell = _cell(artifacts, test, alpha, r, cfg.seed + r)
                logger.info(f"alpha={alpha} repetition={r}: MAE={cell['mae']:.4f} ICC={cell['icc31']}")
                cells.append(cell)

    with stage('report'):
        summary, confusions, per_person = {}, {}, []
        for alpha in cfg.alphas:
            mine = [c for c in cells if c['alpha'] == alpha]
            summary[str(alpha)] = {'mae': _mean_std([c['mae'] for c in mine]),
                                   'icc31': _mean_std([c['icc31'] for c in mine])}
            confusions[str(alpha)] = np.sum([c['confusion'] for c in mine], axis=0).tolist()
            for pid in test.person_ids():
                values = [c['per_person_mae'][pid] for c in mine if pid in c['per_person_mae']]
                if values:
                    per_person.append({'person_id': pid, 'alpha': alpha, 'mae_mean': float(np.mean(values)),
                                       'mae_std': float(np.std(values)),
                                       'n_sequences': len(test.subset([pid]).persons[0].sequences)})
        report = {'first_stage': cfg.first_stage, 'lambda': artifacts.lam, 'alphas': list(cfg.alphas),
                  'repetitions': cfg.repetitions, 'summary': summary, 'cells': cells,
                  'per_person': per_person, 'confusion': confusions, 'seeds': cfg.seeds()}
    return report


def write_report(report: Dict[str, Any], cfg: ExperimentConfig, directory: str, command: str = 'experiment'):
    with stage('report'):
        os.makedirs(directory, exist_ok=True)
        save_data(report, os.path.join(directory, 'report.json'))
        pd.DataFrame(report['per_person']).to_csv(os.path.join(directory, 'per_person_mae.csv'), index=False,
                                                  float_format='%.9g')
        for alpha, confusion in report['confusion'].items():
            confusion_to_frame(np.asarray(confusion)).to_csv(os.path.join(directory, f'confusion_alpha{alpha}.csv'))
        predictions = [row for cell in report['cells'] for row in cell['predictions']]
        pd.DataFrame(predictions).to_csv(os.path.join(directory, 'predictions.csv'), index=False)
        save_data({f"{c['alpha']}/{c['repetition']}": c['ifes'] for c in report['cells']},
                  os.path.join(directory, 'ifes.json'))
        write_manifest(cfg, directory, command)
        logger.info(f"Report written to {directory}")


def run_comparison(cfg: ExperimentConfig, stages: Sequence[str]) -> Dict[str, Any]:
    """
    One alpha sweep per first stage on the same split (the method-comparison table).

    Each stage gets its own config, writing to output_dir/<stage>, so a stage report
    can be replayed from its own manifest.
    """
    cohorts = prepare_cohorts(cfg)
    reports, configs = {}, {}
    for name in stages:
        stage_name = canonical_stage(name)
        stage_cfg = replace(cfg, first_stage=stage_name, output_dir=os.path.join(cfg.output_dir, stage_name))
        configs[stage_name] = stage_cfg
        reports[stage_name] = run_alpha_experiment(stage_cfg, cohorts=cohorts)
    table = [{'first_stage': name, 'alpha': int(alpha), 'mae_mean': s['mae']['mean'], 'mae_std': s['mae']['std'],
              'icc_mean': s['icc31']['mean'], 'icc_std': s['icc31']['std']}
             for name, rep in reports.items() for alpha, s in rep['summary'].items()]
    return {'reports': reports, 'configs': configs, 'table': table}
