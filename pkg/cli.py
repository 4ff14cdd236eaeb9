"""
Command-line entry point for the personalised pain pipeline
"""
import argparse
import os
import sys
from typing import Dict, List, Optional

import pandas as pd

from data import SyntheticConfig, generate_synthetic_cohort, save_cohort
from pipeline import ExperimentConfig, StageError, cohort_summary, evaluate_pspi_stage, load_artifacts, \
    prepare_cohorts, person_seed, run_alpha_experiment, run_comparison, run_inference, run_learning, \
    save_artifacts, write_manifest, write_report
from metrics import evaluate
from utils import setup_logging, save_data, load_data

logger = setup_logging(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='pain-pipeline', description='Personalised VAS pain estimation')
    sub = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='ExperimentConfig JSON or a manifest.json from an earlier run')
    common.add_argument('--seed', type=int, help='base seed')
    common.add_argument('--out', help='output directory')
    common.add_argument('--manifest', help='cohort manifest; a synthetic cohort is generated when omitted')
    common.add_argument('--n-train', type=int, dest='n_train', help='number of training persons')

    gen = sub.add_parser('generate', parents=[common], help='write a synthetic cohort to disk')
    gen.add_argument('--n-persons', type=int, dest='n_persons')
    gen.add_argument('--sequences-per-person', type=int, dest='sequences_per_person')

    train = sub.add_parser('train', parents=[common], help='learn PCA, first stage and HCRF')
    train.add_argument('--first-stage', dest='first_stage')

    infer = sub.add_parser('infer', parents=[common], help='predict VAS for the test persons')
    infer.add_argument('--artifacts', help='directory written by train (default: the one recorded in --config)')
    infer.add_argument('--alpha', type=int, help='labelled sequences used for I-FES (default: recorded, else 0)')

    exp = sub.add_parser('experiment', parents=[common], help='alpha sweep over repetitions')
    exp.add_argument('--first-stage', dest='first_stage', action='append',
                     help='repeat to compare several first stages')
    exp.add_argument('--alphas', type=int, nargs='+')
    exp.add_argument('--repetitions', type=int)

    pspi = sub.add_parser('eval-pspi', parents=[common], help='frame-level PSPI accuracy of the first stage')
    pspi.add_argument('--artifacts', help='directory written by train; trains afresh when omitted')
    pspi.add_argument('--first-stage', dest='first_stage')
    return parser


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Environment defaults, then the --config file, then explicit flags."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_env()
    overrides: Dict = {}
    for key in ('seed', 'manifest', 'n_train', 'alphas', 'repetitions'):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    stages = getattr(args, 'first_stage', None)
    if isinstance(stages, list):
        stages = stages[0] if len(stages) == 1 else None
    if stages:
        overrides['first_stage'] = stages
    if args.out:
        overrides['output_dir'] = args.out
    return cfg.merged(overrides)


def _recorded(args: argparse.Namespace, key: str, default=None):
    """Command argument stored next to the config in a --config run manifest."""
    if not args.config:
        return default
    return load_data(args.config).get(key, default)


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    synthetic = dict(cfg.synthetic)
    for key in ('n_persons', 'sequences_per_person'):
        if getattr(args, key) is not None:
            synthetic[key] = getattr(args, key)
    seed = cfg.seed if args.seed is not None else cfg.cohort_seed
    cohort = generate_synthetic_cohort(SyntheticConfig(**synthetic), seed)
    manifest = save_cohort(cohort, cfg.output_dir)
    save_data(cohort_summary(cohort), os.path.join(cfg.output_dir, 'summary.json'))
    print(f"✅ Wrote {len(cohort.persons)} persons / {cohort.n_sequences()} sequences to {manifest}")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    artifacts = run_learning(cfg)
    save_artifacts(artifacts, cfg.output_dir, cfg)
    print(f"✅ Artifacts saved to {cfg.output_dir} (first stage: {artifacts.first_stage}, lambda={artifacts.lam})")
    return 0


def cmd_infer(args, cfg: ExperimentConfig) -> int:
    artifacts_dir = args.artifacts or _recorded(args, 'artifacts')
    alpha = args.alpha if args.alpha is not None else _recorded(args, 'alpha', 0)
    if not artifacts_dir:
        raise ValueError("infer needs --artifacts, or a --config manifest from an earlier infer run")
    artifacts = load_artifacts(artifacts_dir)
    _, test = prepare_cohorts(cfg)
    rows, pred, truth = [], [], []
    for idx, person in enumerate(test.persons):
        result = run_inference(artifacts, person, alpha, person_seed(cfg.seed, idx))
        for j, p, t in zip(result.evaluated, result.vas_pred, result.vas_true):
            rows.append({'person_id': person.person_id, 'sequence': j, 'ifes': result.ifes,
                         'vas_true': t, 'vas_pred': p})
        pred.extend(result.vas_pred)
        truth.extend(result.vas_true)
    report = evaluate(pred, truth, 11)
    os.makedirs(cfg.output_dir, exist_ok=True)
    pd.DataFrame(rows).to_csv(os.path.join(cfg.output_dir, 'predictions.csv'), index=False)
    save_data({'alpha': alpha, 'artifacts': artifacts_dir, **report.to_dict()},
              os.path.join(cfg.output_dir, 'inference.json'))
    write_manifest(cfg, cfg.output_dir, 'infer', {'alpha': alpha, 'artifacts': os.path.abspath(artifacts_dir)})
    print(f"✅ alpha={alpha}: MAE={report.mae:.3f}, ICC={report.icc31}")
    return 0


def _print_summary(name: str, report: Dict):
    for alpha, s in report['summary'].items():
        icc = s['icc31']['mean']
        icc_text = 'undefined' if icc is None else f"{icc:.3f} ± {s['icc31']['std']:.3f}"
        print(f"  {name} alpha={alpha}: MAE={s['mae']['mean']:.3f} ± {s['mae']['std']:.3f}, ICC={icc_text}")


def cmd_experiment(args, cfg: ExperimentConfig) -> int:
    stages: Optional[List[str]] = args.first_stage or _recorded(args, 'stages')
    if stages and len(stages) > 1:
        comparison = run_comparison(cfg, stages)
        for name, report in comparison['reports'].items():
            stage_cfg = comparison['configs'][name]
            write_report(report, stage_cfg, stage_cfg.output_dir)
            _print_summary(name, report)
        pd.DataFrame(comparison['table']).to_csv(os.path.join(cfg.output_dir, 'comparison.csv'), index=False,
                                                 float_format='%.9g')
        write_manifest(cfg, cfg.output_dir, 'experiment', {'stages': list(comparison['reports'])})
    else:
        report = run_alpha_experiment(cfg)
        write_report(report, cfg, cfg.output_dir)
        _print_summary(cfg.first_stage, report)
    print(f"✅ Results written to {cfg.output_dir}")
    return 0


def cmd_eval_pspi(args, cfg: ExperimentConfig) -> int:
    train, test = prepare_cohorts(cfg)
    artifacts = load_artifacts(args.artifacts) if args.artifacts else run_learning(cfg, train)
    report = evaluate_pspi_stage(artifacts, test)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_data({'first_stage': artifacts.first_stage, **report.to_dict()},
              os.path.join(cfg.output_dir, 'pspi_report.json'))
    write_manifest(cfg, cfg.output_dir, 'eval-pspi')
    icc = 'undefined' if report.icc31 is None else f"{report.icc31:.3f}"
    print(f"✅ PSPI stage: MAE={report.mae:.3f}, ICC={icc}, frames={report.n}")
    return 0


COMMANDS = {'generate': cmd_generate, 'train': cmd_train, 'infer': cmd_infer,
            'experiment': cmd_experiment, 'eval-pspi': cmd_eval_pspi}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](args, cfg)
    except StageError as e:
        logger.error(f"{args.command} failed in stage '{e.stage}': {e}")
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
