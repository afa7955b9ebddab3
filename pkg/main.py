#!/usr/bin/env python3
"""
Anymodal Segmentation Distillation - Main Entry Point
Generate synthetic data, train the PML teacher and the anymodal student,
evaluate every modality subset and run the loss ablations.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from ablation import run_ablation, run_sweep
from checkpoint_manager import CheckpointManager, params_checksum, read_checkpoint
from config import ExperimentConfig
from error_handler import ConfigError, ErrorHandler, handle_exceptions
from evaluation import check_compatible, check_modalities, evaluate_anymodal
from excel_exporter import ExcelExporter
from grad_suite import assert_all_pass, run_checks
from input_validator import InputValidator
from synth_data import RenderSettings, generate_dataset, read_dataset, split_holdout, write_dataset
from training_manager import TrainingManager
from ui_helpers import MessageFormatter

logger = logging.getLogger(__name__)

COMMANDS = ('gen-data', 'train-teacher', 'train-student', 'eval', 'ablate', 'gradcheck', 'sweep', 'checkpoints')


class JsonArgumentParser(argparse.ArgumentParser):
    """Argument errors become a JSON error record on stderr and exit status 2"""

    def error(self, message):
        record = {'error': 'ArgumentError', 'message': message, 'context': {'prog': self.prog}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog='anymodal', description=__doc__.strip().splitlines()[0])
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help='dotenv-format experiment config')
    parser.add_argument('--seed', help='SEED override (DATA_SEED for gen-data)')
    parser.add_argument('--out', help='output directory (OUTPUT_DIR)')
    parser.add_argument('--toggles', help='enabled loss terms, e.g. sup,mad,umd,cmd,fused-kd')
    parser.add_argument('--checkpoint', help='teacher checkpoint (train-student, ablate, sweep) or evaluated checkpoint (eval)')
    parser.add_argument('--dataset', help='dataset file (DATASET_PATH)')
    parser.add_argument('--xlsx', action='store_true', help='also write an Excel workbook')
    parser.add_argument('--param', help='sweep parameter: lambda_mad, alpha, beta or fused_kd_weight')
    parser.add_argument('--values', help='comma-separated sweep values')
    parser.add_argument('--trials', type=int, default=20, help='random inputs per gradient check')
    parser.add_argument('--keep', type=int, help='checkpoints: delete all but the newest N (the teacher is kept)')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    return parser


def setup_logging(verbose: bool = False):
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr
    )


def resolve_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        is_valid, error, seed = InputValidator.validate_integer(args.seed, 0, InputValidator.MAX_SEED, '--seed')
        if not is_valid:
            raise ConfigError(error)
        overrides['DATA_SEED' if args.command == 'gen-data' else 'SEED'] = seed
    if args.out:
        overrides['OUTPUT_DIR'] = args.out
    if args.dataset:
        overrides['DATASET_PATH'] = args.dataset
    if overrides:
        config = config.with_overrides(**overrides)
    if args.toggles:
        is_valid, error, toggles = InputValidator.parse_toggles(args.toggles)
        if not is_valid:
            raise ConfigError(error)
        config = config.with_toggles(toggles)
    return config.validate()


def emit(summary: dict) -> int:
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


def cmd_gen_data(config: ExperimentConfig, args) -> int:
    settings = RenderSettings(**config.get_render_config())
    samples, manifest = generate_dataset(config.NUM_SAMPLES, config.IMAGE_SIZE, config.IMAGE_SIZE,
                                         config.NUM_CLASSES, config.MODALITIES, config.DATA_SEED, settings)
    path = write_dataset(samples, manifest, config.DATASET_PATH)
    return emit({'command': 'gen-data', 'path': path, 'manifest': manifest.to_dict()})


def cmd_train_teacher(config: ExperimentConfig, args) -> int:
    result = TrainingManager(config).train_teacher()
    return emit({'command': 'train-teacher', **result.summary(), 'checksum': params_checksum(result.params)})


def _require_checkpoint(args, purpose: str) -> str:
    if not args.checkpoint:
        raise ConfigError(f"--checkpoint is required for {purpose}")
    return args.checkpoint


def cmd_train_student(config: ExperimentConfig, args) -> int:
    teacher = args.checkpoint or CheckpointManager(config.OUTPUT_DIR).path_for('teacher')
    result = TrainingManager(config).train_student(teacher)
    if result.last_report is not None:
        logger.info(f"Last step: {MessageFormatter.format_loss_report(result.last_report)}")
    return emit({'command': 'train-student', **result.summary(), 'toggles': config.toggles()})


def cmd_eval(config: ExperimentConfig, args) -> int:
    params, _ = read_checkpoint(_require_checkpoint(args, 'eval'))
    dataset_path = config.eval_dataset_path()
    samples, manifest = read_dataset(dataset_path)
    check_modalities(config.MODALITIES, manifest, dataset_path)
    check_compatible(params, manifest)
    # a dedicated eval file is scored whole; the training file only on its held-out split
    if config.EVAL_DATASET_PATH:
        holdout = samples
    else:
        _, holdout = split_holdout(samples, config.HOLDOUT_FRACTION)
    table = evaluate_anymodal(params, holdout, config.MODALITIES, workers=config.EVAL_WORKERS)
    logger.info(f"Anymodal evaluation:\n{MessageFormatter.format_eval_table(table)}")

    csv_path = table.to_csv(os.path.join(config.OUTPUT_DIR, 'anymodal_eval.csv'))
    summary = {'command': 'eval', 'csv': csv_path, 'dataset': dataset_path, 'samples': len(holdout),
               **table.as_dict()}
    if args.xlsx:
        summary['xlsx'] = ExcelExporter(config.OUTPUT_DIR).export_eval_table(table)
    return emit(summary)


def _comparison_outputs(config: ExperimentConfig, table, name: str, xlsx: bool) -> dict:
    logger.info(f"{name}:\n{MessageFormatter.format_comparison(table)}")
    outputs = {'csv': table.to_csv(os.path.join(config.OUTPUT_DIR, f'{name}.csv'))}
    if xlsx:
        outputs['xlsx'] = ExcelExporter(config.OUTPUT_DIR).export_comparison(table, f'{name}.xlsx')
    return outputs


def cmd_ablate(config: ExperimentConfig, args) -> int:
    table = run_ablation(config, teacher_checkpoint=args.checkpoint)
    outputs = _comparison_outputs(config, table, 'ablation', args.xlsx)
    return emit({'command': 'ablate', **outputs, **table.as_dict()})


def cmd_sweep(config: ExperimentConfig, args) -> int:
    if not args.param:
        raise ConfigError("--param is required for sweep")
    values = None
    if args.values:
        is_valid, error, values = InputValidator.parse_number_list(args.values, '--values')
        if not is_valid:
            raise ConfigError(error)
    table = run_sweep(config, args.param, values, teacher_checkpoint=args.checkpoint)
    outputs = _comparison_outputs(config, table, f'sweep_{args.param}', args.xlsx)
    return emit({'command': 'sweep', 'param': args.param, **outputs, **table.as_dict()})


def cmd_gradcheck(config: ExperimentConfig, args) -> int:
    results = run_checks(trials=args.trials, seed=config.SEED)
    assert_all_pass(results)
    return emit({'command': 'gradcheck', 'trials': args.trials,
                 'max_error': {r.name: r.max_error for r in results}})


def cmd_checkpoints(config: ExperimentConfig, args) -> int:
    manager = CheckpointManager(config.OUTPUT_DIR)
    deleted = 0
    if args.keep is not None:
        if args.keep < 0:
            raise ConfigError(f"--keep must be non-negative, got {args.keep}")
        teacher = os.path.basename(manager.path_for('teacher'))
        deleted = manager.cleanup_old_checkpoints(keep_count=args.keep, protect=(teacher,))
    return emit({'command': 'checkpoints', 'deleted': deleted, 'checkpoints': manager.list_checkpoints(),
                 **manager.get_checkpoint_stats()})


HANDLERS = {
    'gen-data': cmd_gen_data,
    'train-teacher': cmd_train_teacher,
    'train-student': cmd_train_student,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'gradcheck': cmd_gradcheck,
    'sweep': cmd_sweep,
    'checkpoints': cmd_checkpoints,
}


@handle_exceptions
def run(args) -> int:
    config = resolve_config(args)
    ErrorHandler.log_run_event(args.command, 'start', {'output_dir': config.OUTPUT_DIR, 'seed': config.SEED})
    return HANDLERS[args.command](config, args)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    return run(args)


if __name__ == '__main__':
    sys.exit(main())
