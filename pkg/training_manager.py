"""
Training Manager
Two-stage protocol: PML teacher training, then frozen-teacher student
distillation under anymodal dropout. Single-threaded and deterministic
given the config seeds.
"""
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Graph, Tensor
from checkpoint_manager import CheckpointManager, file_checksum, params_checksum, read_checkpoint
from config import ExperimentConfig
from distill_losses import (LossComponents, LossReport, LossWeights, ModalityMask, cmd_loss, draw_masks,
                            fused_kd_loss, mad_loss, supervised_ce, total_loss, umd_loss)
from error_handler import ConfigError, ErrorHandler, InvariantBreachError, NonFiniteLossError, ShapeError
from evaluation import check_modalities, full_modality_miou
from metrics_log import MetricsLog
from segmentor import SegmentOutput, SegmentorParams, downsample_labels, init_params, segment
from synth_data import SceneSample, read_dataset, split_holdout, stack_batch

logger = logging.getLogger(__name__)

# Relative tolerance between the graph total and the re-summed LossReport total
TOTAL_TOLERANCE = 1e-4

# Independent random streams derived from SEED
INIT_STREAM = 0
SHUFFLE_STREAM = 1
MASK_STREAM = 2


class PolySchedule:
    """Constant warm-up at a fraction of the base rate, then polynomial decay to zero"""

    def __init__(self, base_lr: float, total_steps: int, power: float = 0.9,
                 warmup_fraction: float = 0.05, warmup_ratio: float = 0.1):
        self.base_lr = base_lr
        self.total_steps = max(0, int(total_steps))
        self.power = power
        self.warmup_ratio = warmup_ratio
        self.warmup_steps = min(int(round(warmup_fraction * self.total_steps)), max(0, self.total_steps - 1))

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * self.warmup_ratio
        decay_steps = self.total_steps - self.warmup_steps
        progress = min(1.0, (step - self.warmup_steps) / decay_steps) if decay_steps > 0 else 0.0
        return self.base_lr * (1.0 - progress) ** self.power


class AdamW:
    """Adam with decoupled weight decay over a fixed list of tensors"""

    def __init__(self, params: Sequence[Tensor], betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.first, self.second):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            if self.weight_decay:
                p.data -= np.asarray(lr * self.weight_decay, dtype=p.data.dtype) * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data -= np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainingResult:
    checkpoint_path: str
    metrics_path: str
    params: SegmentorParams
    last_report: Optional[LossReport] = None
    epochs: List[dict] = field(default_factory=list)

    def summary(self) -> dict:
        last = self.epochs[-1] if self.epochs else {}
        return {
            'checkpoint': self.checkpoint_path,
            'metrics': self.metrics_path,
            'epochs': len(self.epochs),
            'train_miou': last.get('train_miou'),
            'holdout_miou': last.get('holdout_miou'),
        }


def group_by_mask(masks: Sequence[ModalityMask]) -> "OrderedDict[ModalityMask, List[int]]":
    """Batch indices per distinct mask, in first-appearance order"""
    groups = OrderedDict()
    for index, mask in enumerate(masks):
        groups.setdefault(mask, []).append(index)
    return groups


def _weighted_sum(terms: List[Tuple[Tensor, float]]) -> Optional[Tensor]:
    total = None
    for term, weight in terms:
        scaled = ad.scale(term, weight)
        total = scaled if total is None else ad.add(total, scaled)
    return total


def _value(tensor: Optional[Tensor]) -> float:
    return tensor.item() if tensor is not None else 0.0


class TrainingManager:
    """Runs teacher, student and dropout-baseline training for one config"""

    def __init__(self, config: ExperimentConfig, samples: Optional[Sequence[SceneSample]] = None):
        self.config = config.validate()
        self.modalities = list(config.MODALITIES)
        self.checkpoints = CheckpointManager(config.OUTPUT_DIR)
        self._samples = list(samples) if samples is not None else None

    # Data

    def load_samples(self) -> List[SceneSample]:
        if self._samples is None:
            samples, manifest = read_dataset(self.config.DATASET_PATH)
            self._check_manifest(manifest)
            self._samples = samples
        return self._samples

    def _check_manifest(self, manifest):
        check_modalities(self.modalities, manifest, self.config.DATASET_PATH)
        if manifest.num_classes != self.config.NUM_CLASSES:
            raise ConfigError(f"dataset has K={manifest.num_classes}, config NUM_CLASSES={self.config.NUM_CLASSES}")
        if (manifest.h, manifest.w) != (self.config.IMAGE_SIZE, self.config.IMAGE_SIZE):
            raise ConfigError(f"dataset scenes are {manifest.h}x{manifest.w}, config IMAGE_SIZE={self.config.IMAGE_SIZE}")

    def split(self) -> Tuple[List[SceneSample], List[SceneSample]]:
        return split_holdout(self.load_samples(), self.config.HOLDOUT_FRACTION)

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.SEED, stream])

    def _init_params(self) -> SegmentorParams:
        cfg = self.config
        return init_params(cfg.CHANNELS, cfg.DECODER_CHANNELS, cfg.NUM_CLASSES, [cfg.SEED, INIT_STREAM],
                           cfg.MERGE_FACTOR)

    def _schedule(self, train_count: int) -> PolySchedule:
        cfg = self.config
        steps_per_epoch = math.ceil(train_count / cfg.BATCH_SIZE)
        return PolySchedule(cfg.LEARNING_RATE, steps_per_epoch * cfg.EPOCHS, cfg.POWER,
                            cfg.WARMUP_FRACTION, cfg.WARMUP_RATIO)

    def _batches(self, train: Sequence[SceneSample], rng: np.random.Generator):
        order = rng.permutation(len(train))
        for start in range(0, len(order), self.config.BATCH_SIZE):
            yield [train[i] for i in order[start:start + self.config.BATCH_SIZE]]

    def _labels(self, batch: Sequence[SceneSample]) -> np.ndarray:
        labels = np.stack([s.label_map for s in batch]).astype(np.int64)
        return downsample_labels(labels, self.config.NUM_CLASSES, self.config.MERGE_FACTOR)

    # Shared loop

    def _check_step(self, step: int, loss: Tensor, report: LossReport, weights: LossWeights):
        graph_total = float(loss.data.reshape(-1)[0])
        if not report.is_finite() or not math.isfinite(graph_total):
            raise NonFiniteLossError(f"non-finite loss at step {step}",
                                     {'step': step, 'components': report.as_dict()})
        if abs(graph_total - report.total) > TOTAL_TOLERANCE * max(1.0, abs(report.total)) \
                or report.identity_error(weights) > 1e-9 * max(1.0, abs(report.total)):
            raise InvariantBreachError(f"loss total {graph_total} disagrees with its components at step {step}",
                                       {'step': step, 'components': report.as_dict()})

    def _run(self, name: str, params: SegmentorParams, step_fn, weights: LossWeights,
             metrics: MetricsLog) -> Tuple[Optional[LossReport], List[dict]]:
        """Epoch loop shared by every stage; step_fn(batch, step) -> (loss, report)"""
        cfg = self.config
        train, holdout = self.split()
        schedule = self._schedule(len(train))
        optimizer = AdamW(params.parameters(), weight_decay=cfg.WEIGHT_DECAY)
        shuffle_rng = self._rng(SHUFFLE_STREAM)

        step = 0
        last_report = None
        epochs = []
        for epoch in range(cfg.EPOCHS):
            totals: Dict[str, float] = OrderedDict((k, 0.0) for k in ('sup', 'mad', 'umd', 'cmd', 'fused', 'total'))
            batches = 0
            for batch in self._batches(train, shuffle_rng):
                lr = schedule.lr_at(step)
                optimizer.zero_grad()
                with Graph() as graph:
                    loss, report = step_fn(batch, step)
                self._check_step(step, loss, report, weights)
                ad.backward(graph, loss)
                optimizer.step(lr)

                metrics.append({'kind': 'step', 'epoch': epoch, 'step': step, 'lr': lr, **report.as_dict()})
                for key in totals:
                    totals[key] += getattr(report, key)
                batches += 1
                step += 1
                last_report = report

            if not params.all_finite():
                raise NonFiniteLossError(f"{name}: parameters became non-finite in epoch {epoch}",
                                         {'step': step, 'epoch': epoch})
            record = {
                'kind': 'epoch',
                'epoch': epoch,
                'step': step,
                'loss': {k: v / max(batches, 1) for k, v in totals.items()},
                'train_miou': full_modality_miou(params, train, self.modalities),
                'holdout_miou': full_modality_miou(params, holdout, self.modalities),
            }
            metrics.append(record)
            epochs.append(record)
            logger.info(f"{name} epoch {epoch + 1}/{cfg.EPOCHS}: loss {record['loss']['total']:.4f}, "
                        f"train mIoU {100 * record['train_miou']:.2f}")
        return last_report, epochs

    # Teacher

    def train_teacher(self, name: str = 'teacher') -> TrainingResult:
        """PML training on every modality with supervision only; the checkpoint is saved frozen"""
        params = self._init_params()
        metrics = MetricsLog(os.path.join(self.config.OUTPUT_DIR, f'{name}_metrics.jsonl'))
        weights = LossWeights(0.0, 0.0, 0.0, 0.0)
        ErrorHandler.log_run_event(name, 'start', {'epochs': self.config.EPOCHS, 'modalities': self.modalities})

        def step_fn(batch, step):
            images, _ = stack_batch(batch, self.modalities)
            output = segment(images, params, self.modalities)
            sup = supervised_ce(output.probs, self._labels(batch))
            return sup, LossReport.from_components(weights, sup.item())

        last_report, epochs = self._run(name, params, step_fn, weights, metrics)
        params.freeze()
        path = self.checkpoints.save_checkpoint(params, name, {'role': 'teacher', 'seed': self.config.SEED})
        ErrorHandler.log_run_event(name, 'finished', {'checkpoint': path, 'checksum': params_checksum(params)})
        return TrainingResult(path, metrics.path, params, last_report, epochs)

    # Student

    def load_teacher(self, teacher_checkpoint: str) -> SegmentorParams:
        teacher, meta = read_checkpoint(teacher_checkpoint)
        if not meta.get('frozen'):
            raise ConfigError(f"teacher checkpoint {teacher_checkpoint} is not marked frozen",
                              {'path': teacher_checkpoint})
        expected = (self.config.CHANNELS, self.config.DECODER_CHANNELS, self.config.NUM_CLASSES)
        if (teacher.channels, teacher.decoder_channels, teacher.num_classes) != expected:
            raise ShapeError(f"teacher shape {teacher.shape_config()} does not match the config")
        return teacher

    def _student_step(self, student: SegmentorParams, teacher: Optional[SegmentorParams],
                      weights: LossWeights, mask_rng: np.random.Generator):
        modalities = self.modalities

        def step_fn(batch, step):
            masks = draw_masks(mask_rng, modalities, len(batch))
            labels = self._labels(batch)
            parts = {k: [] for k in ('sup', 'mad', 'umd', 'cmd', 'fused')}
            diagnostics: dict = {}
            for mask, indices in group_by_mask(masks).items():
                share = len(indices) / len(batch)
                group = [batch[i] for i in indices]
                images, _ = stack_batch(group, modalities)
                out = segment(images, student, list(mask))
                parts['sup'].append((supervised_ce(out.probs, labels[indices]), share))
                if teacher is None:
                    continue
                ref: SegmentOutput = segment(images, teacher, modalities)
                if weights.lambda_mad:
                    parts['mad'].append((mad_loss(out.probs, ref.probs), share))
                if weights.alpha:
                    parts['umd'].append((umd_loss(out.features, ref.features, mask), share))
                if weights.beta:
                    parts['cmd'].append((cmd_loss(out.features, ref.features, mask, diagnostics), share))
                if weights.fused_kd:
                    parts['fused'].append((fused_kd_loss(out.fused, ref.fused), share))

            components = LossComponents(**{k: _weighted_sum(v) for k, v in parts.items()})
            loss = total_loss(components, weights)
            report = LossReport.from_components(
                weights, _value(components.sup), _value(components.mad), _value(components.umd),
                _value(components.cmd), _value(components.fused),
                cmd_pairs=diagnostics.pop('cmd_pairs', {}), diagnostics=diagnostics)
            return loss, report

        return step_fn

    def train_student(self, teacher_checkpoint: str, name: str = 'student') -> TrainingResult:
        """
        Distil a frozen teacher into an anymodal student.

        Each sample draws its own modality mask; the batch is split into
        groups sharing a mask and every loss term is the group-size-weighted
        mean. The teacher is recomputed on all modalities every step and its
        checksum must not change over the run.
        """
        weights = self.config.loss_weights()
        teacher = self.load_teacher(teacher_checkpoint) if self.config.distillation_enabled() else None
        before = params_checksum(teacher) if teacher is not None else None
        before_file = file_checksum(teacher_checkpoint) if teacher is not None else None
        ErrorHandler.log_run_event(name, 'start', {'teacher': teacher_checkpoint, 'weights': asdict(weights)})

        student = self._init_params()
        metrics = MetricsLog(os.path.join(self.config.OUTPUT_DIR, f'{name}_metrics.jsonl'))
        step_fn = self._student_step(student, teacher, weights, self._rng(MASK_STREAM))
        last_report, epochs = self._run(name, student, step_fn, weights, metrics)

        if teacher is not None and params_checksum(teacher) != before:
            raise InvariantBreachError("teacher parameters changed during student training",
                                       {'before': before, 'after': params_checksum(teacher)})
        if teacher is not None and file_checksum(teacher_checkpoint) != before_file:
            raise InvariantBreachError("teacher checkpoint file changed during student training",
                                       {'path': teacher_checkpoint})

        path = self.checkpoints.save_checkpoint(student, name, {'role': 'student', 'seed': self.config.SEED,
                                                                'teacher_checksum': before_file})
        ErrorHandler.log_run_event(name, 'finished', {'checkpoint': path})
        return TrainingResult(path, metrics.path, student, last_report, epochs)

    def train_dropout_baseline(self, name: str = 'baseline') -> TrainingResult:
        """Supervision under anymodal dropout only; never reads a teacher"""
        student = self._init_params()
        weights = LossWeights(0.0, 0.0, 0.0, 0.0)
        mask_rng = self._rng(MASK_STREAM)
        metrics = MetricsLog(os.path.join(self.config.OUTPUT_DIR, f'{name}_metrics.jsonl'))

        def step_fn(batch, step):
            masks = draw_masks(mask_rng, self.modalities, len(batch))
            labels = self._labels(batch)
            terms = []
            for mask, indices in group_by_mask(masks).items():
                images, _ = stack_batch([batch[i] for i in indices], self.modalities)
                probs = segment(images, student, list(mask)).probs
                terms.append((supervised_ce(probs, labels[indices]), len(indices) / len(batch)))
            sup = _weighted_sum(terms)
            return sup, LossReport.from_components(weights, sup.item())

        last_report, epochs = self._run(name, student, step_fn, weights, metrics)
        path = self.checkpoints.save_checkpoint(student, name, {'role': 'student', 'seed': self.config.SEED})
        return TrainingResult(path, metrics.path, student, last_report, epochs)


def train_teacher(config: ExperimentConfig, samples: Optional[Sequence[SceneSample]] = None) -> TrainingResult:
    return TrainingManager(config, samples).train_teacher()


def train_student(config: ExperimentConfig, teacher_checkpoint: str,
                  samples: Optional[Sequence[SceneSample]] = None, name: str = 'student') -> TrainingResult:
    return TrainingManager(config, samples).train_student(teacher_checkpoint, name)


def train_dropout_baseline(config: ExperimentConfig, samples: Optional[Sequence[SceneSample]] = None,
                           name: str = 'baseline') -> TrainingResult:
    return TrainingManager(config, samples).train_dropout_baseline(name)
