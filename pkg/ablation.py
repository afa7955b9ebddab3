"""
Loss ablations, hyperparameter sweeps and the fused-feature KD counter-experiment
"""
import csv
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import ExperimentConfig
from error_handler import ConfigError, ErrorHandler, safe_execute
from evaluation import EvalTable, evaluate_anymodal
from synth_data import SceneSample
from training_manager import TrainingManager

logger = logging.getLogger(__name__)

# Loss combinations in row order; the first row is the reference for deltas
ABLATION_ROWS = [
    ('sup', {}),
    ('sup+mad', {'mad': True}),
    ('sup+mad+umd', {'mad': True, 'umd': True}),
    ('sup+mad+umd+cmd', {'mad': True, 'umd': True, 'cmd': True}),
]
FUSED_KD_ROW = ('sup+mad+umd+cmd+fused-kd', {'mad': True, 'umd': True, 'cmd': True, 'fused_kd': True})

FULL = {'mad': True, 'umd': True, 'cmd': True}

# parameter -> (config key, toggles of the swept runs, default values)
SWEEPS = {
    'lambda_mad': ('LAMBDA_MAD', {'mad': True}, [1.0, 20.0, 50.0, 80.0]),
    'alpha': ('ALPHA', {'mad': True, 'umd': True}, [0.0, 3.0, 5.0, 7.0, 10.0]),
    'beta': ('BETA', FULL, [0.0, 1.0, 3.0, 5.0, 7.0, 10.0, 13.0, 15.0, 20.0]),
    'fused_kd_weight': ('FUSED_KD_WEIGHT', dict(FULL, fused_kd=True), [0.0, 1.0, 5.0, 10.0]),
}
SWEEP_ALIASES = {'lambda': 'lambda_mad', 'lam': 'lambda_mad', 'fused_kd': 'fused_kd_weight', 'gamma': 'fused_kd_weight'}


@dataclass
class AblationRow:
    label: str
    toggles: Dict[str, bool]
    table: Optional[EvalTable] = None
    checkpoint: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.table is None


@dataclass
class AblationTable:
    """Comparison grid: one EvalTable per row, deltas against the first row"""
    modalities: List[str]
    rows: List[AblationRow] = field(default_factory=list)

    def columns(self) -> List[str]:
        for row in self.rows:
            if not row.failed:
                return row.table.names() + ['Mean']
        return ['Mean']

    def value(self, row: AblationRow, column: str) -> Optional[float]:
        if row.failed:
            return None
        return row.table.mean if column == 'Mean' else row.table.miou(column)

    def delta(self, row: AblationRow, column: str = 'Mean') -> Optional[float]:
        """Difference to the first row, None when either row failed"""
        if not self.rows:
            return None
        reference = self.value(self.rows[0], column)
        value = self.value(row, column)
        if reference is None or value is None:
            return None
        return value - reference

    def row(self, label: str) -> AblationRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def as_dict(self) -> dict:
        return {
            'modalities': list(self.modalities),
            'rows': [
                {
                    'label': row.label,
                    'failed': row.failed,
                    'values': {c: self.value(row, c) for c in self.columns()},
                    'delta': {c: self.delta(row, c) for c in self.columns()},
                }
                for row in self.rows
            ],
        }

    def to_csv(self, path: str) -> str:
        """mIoU in percent per subset and Mean, followed by the delta columns"""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        columns = self.columns()
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['row'] + columns + [f'delta_{c}' for c in columns])
            for row in self.rows:
                if row.failed:
                    writer.writerow([row.label] + ['failed'] * (2 * len(columns)))
                    continue
                values = [f'{100 * self.value(row, c):.4f}' for c in columns]
                deltas = ['' if self.delta(row, c) is None else f'{100 * self.delta(row, c):+.4f}' for c in columns]
                writer.writerow([row.label] + values + deltas)
        logger.info(f"Comparison table written: {path}")
        return path


def _slug(label: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.-]+', '_', label)


class AblationRunner:
    """Trains one student per row from a shared seed and teacher, then evaluates each"""

    def __init__(self, config: ExperimentConfig, samples: Optional[Sequence[SceneSample]] = None):
        self.config = config.validate()
        self.manager = TrainingManager(config, samples)
        self.samples = self.manager.load_samples()

    def ensure_teacher(self, teacher_checkpoint: Optional[str]) -> str:
        if teacher_checkpoint:
            return teacher_checkpoint
        logger.info("No teacher checkpoint given, training one first")
        return self.manager.train_teacher().checkpoint_path

    def run_row(self, label: str, config: ExperimentConfig, teacher_checkpoint: str) -> AblationRow:
        toggles = config.toggles()

        @safe_execute
        def member():
            manager = TrainingManager(config, self.samples)
            result = manager.train_student(teacher_checkpoint, name=f'ablation_{_slug(label)}')
            _, holdout = manager.split()
            table = evaluate_anymodal(result.params, holdout, config.MODALITIES, workers=config.EVAL_WORKERS)
            return result.checkpoint_path, table

        outcome = member()
        if outcome is None:
            ErrorHandler.log_run_event(label, 'failed', {'toggles': toggles})
            return AblationRow(label, toggles)
        checkpoint, table = outcome
        ErrorHandler.log_run_event(label, 'evaluated', {'mean_miou': table.mean})
        return AblationRow(label, toggles, table, checkpoint)


def run_ablation(config: ExperimentConfig, teacher_checkpoint: Optional[str] = None,
                 samples: Optional[Sequence[SceneSample]] = None, include_fused_kd: bool = True,
                 rows: Optional[Sequence] = None) -> AblationTable:
    """
    Loss-combination grid: {sup}, {sup, mad}, {sup, mad, umd}, the full
    objective and, optionally, the full objective plus fused-feature KD.
    A failing member leaves its row marked failed; the others still run.
    """
    runner = AblationRunner(config, samples)
    teacher_checkpoint = runner.ensure_teacher(teacher_checkpoint)
    plan = list(rows) if rows is not None else ABLATION_ROWS + ([FUSED_KD_ROW] if include_fused_kd else [])

    table = AblationTable(list(config.MODALITIES))
    for label, toggles in plan:
        table.rows.append(runner.run_row(label, config.with_toggles(toggles), teacher_checkpoint))
    failed = [row.label for row in table.rows if row.failed]
    if failed:
        logger.warning(f"Ablation finished with failed rows: {failed}")
    return table


def sweep_parameter(name: str) -> str:
    key = SWEEP_ALIASES.get(name.lower(), name.lower())
    if key not in SWEEPS:
        raise ConfigError(f"unknown sweep parameter '{name}', expected one of {sorted(SWEEPS)}")
    return key


def sweep_label(parameter: str, value: float) -> str:
    return 'w/o' if value == 0 else f'{parameter}={value:g}'


def run_sweep(config: ExperimentConfig, parameter: str, values: Optional[Sequence[float]] = None,
              teacher_checkpoint: Optional[str] = None,
              samples: Optional[Sequence[SceneSample]] = None) -> AblationTable:
    """One student per value of a loss weight, with the toggles of that weight's table"""
    parameter = sweep_parameter(parameter)
    key, toggles, defaults = SWEEPS[parameter]
    values = list(defaults if values is None else values)

    runner = AblationRunner(config, samples)
    teacher_checkpoint = runner.ensure_teacher(teacher_checkpoint)
    base = config.with_toggles(toggles)

    table = AblationTable(list(config.MODALITIES))
    for value in values:
        label = sweep_label(parameter, value)
        table.rows.append(runner.run_row(label, base.with_overrides(**{key: float(value)}), teacher_checkpoint))
    return table


def run_fused_kd_check(config: ExperimentConfig, seeds: Sequence[int],
                       samples: Optional[Sequence[SceneSample]] = None) -> dict:
    """
    Full objective with and without fused-feature KD, per seed.

    Returns:
        {'seeds', 'deltas' (Mean with minus without, per seed), 'mean_delta'}
    """
    deltas = []
    for seed in seeds:
        seeded = config.with_overrides(SEED=int(seed), OUTPUT_DIR=os.path.join(config.OUTPUT_DIR, f'seed_{seed}'))
        table = run_ablation(seeded, samples=samples, rows=[('full', FULL), FUSED_KD_ROW])
        delta = table.delta(table.rows[1])
        deltas.append(delta)
        logger.info(f"Fused-KD check seed {seed}: delta Mean {delta}")
    finite = [d for d in deltas if d is not None]
    return {
        'seeds': [int(s) for s in seeds],
        'deltas': deltas,
        'mean_delta': float(np.mean(finite)) if finite else None,
    }
