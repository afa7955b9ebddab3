"""
Anymodal evaluation
Per-class IoU / mIoU and the table over every non-empty modality subset
"""
import csv
import itertools
import logging
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from error_handler import ConfigError, EmptyPredictionError, LabelRangeError, ShapeError
from segmentor import SegmentorParams, downsample_labels, predict_labels, segment
from synth_data import SceneSample, stack_batch

logger = logging.getLogger(__name__)

Subset = Tuple[str, ...]
PredictFn = Callable[[Subset, Sequence[SceneSample]], np.ndarray]


def _check_grids(pred: np.ndarray, true: np.ndarray, num_classes: int):
    if pred.shape != true.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match labels {true.shape}")
    if pred.size == 0:
        raise EmptyPredictionError("empty prediction grid")
    for name, grid in (('prediction', pred), ('label', true)):
        if grid.min() < 0 or grid.max() >= num_classes:
            raise LabelRangeError(f"{name} classes outside [0, {num_classes})",
                                  {'min': int(grid.min()), 'max': int(grid.max())})


def intersections_unions(pred: np.ndarray, true: np.ndarray, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class |pred_k & true_k| and |pred_k | true_k|"""
    pred = np.asarray(pred).astype(np.int64)
    true = np.asarray(true).astype(np.int64)
    _check_grids(pred, true, num_classes)
    pred_counts = np.bincount(pred.reshape(-1), minlength=num_classes)
    true_counts = np.bincount(true.reshape(-1), minlength=num_classes)
    hits = pred.reshape(-1)[pred.reshape(-1) == true.reshape(-1)]
    intersection = np.bincount(hits, minlength=num_classes)
    return intersection, pred_counts + true_counts - intersection


def iou_from_counts(intersection: np.ndarray, union: np.ndarray) -> Tuple[np.ndarray, float]:
    """IoU per class (NaN where the union is empty) and the mean over the defined classes"""
    iou = np.full(len(union), np.nan)
    defined = union > 0
    iou[defined] = intersection[defined] / union[defined]
    if not defined.any():
        raise EmptyPredictionError("no class occurs in either prediction or labels")
    return iou, float(np.mean(iou[defined]))


def compute_miou(pred_labels: np.ndarray, true_labels: np.ndarray, num_classes: int) -> Tuple[np.ndarray, float]:
    """
    Per-class IoU and mIoU of two class grids.

    Classes absent from both grids get NaN and are excluded from the mean.
    """
    return iou_from_counts(*intersections_unions(pred_labels, true_labels, num_classes))


def modality_subsets(modalities: Sequence[str]) -> List[Subset]:
    """Every non-empty subset, by size then by position in the modality list"""
    modalities = list(modalities)
    return [combo for r in range(1, len(modalities) + 1) for combo in itertools.combinations(modalities, r)]


@dataclass
class SubsetResult:
    subset: Subset
    iou: np.ndarray
    miou: float

    @property
    def name(self) -> str:
        return ''.join(self.subset)


@dataclass
class EvalTable:
    modalities: List[str]
    num_classes: int
    rows: "OrderedDict[str, SubsetResult]" = field(default_factory=OrderedDict)

    @property
    def mean(self) -> float:
        """Arithmetic mean of the per-subset mIoU"""
        return float(np.mean([r.miou for r in self.rows.values()])) if self.rows else float('nan')

    def names(self) -> List[str]:
        return list(self.rows)

    def miou(self, name: str) -> float:
        return self.rows[name].miou

    def mean_of(self, names: Sequence[str]) -> float:
        return float(np.mean([self.rows[n].miou for n in names]))

    def as_dict(self) -> dict:
        return {
            'modalities': list(self.modalities),
            'rows': {name: {'miou': r.miou, 'iou': [None if np.isnan(v) else float(v) for v in r.iou]}
                     for name, r in self.rows.items()},
            'mean': self.mean,
        }

    def to_csv(self, path: str) -> str:
        """One row per subset (percent), then the Mean row"""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['subset'] + [f'iou_{k}' for k in range(self.num_classes)] + ['miou'])
            for name, row in self.rows.items():
                writer.writerow([name] + ['' if np.isnan(v) else f'{100 * v:.4f}' for v in row.iou]
                                + [f'{100 * row.miou:.4f}'])
            writer.writerow(['Mean'] + [''] * self.num_classes + [f'{100 * self.mean:.4f}'])
        logger.info(f"EvalTable written: {path}")
        return path


def model_predictor(params: SegmentorParams, batch_size: int = 16) -> PredictFn:
    """Predictions of a segmentor using only the given subset of modalities"""
    def predict(subset: Subset, samples: Sequence[SceneSample]) -> np.ndarray:
        outputs = []
        for start in range(0, len(samples), batch_size):
            images, _ = stack_batch(samples[start:start + batch_size], subset)
            outputs.append(predict_labels(segment(images, params, subset).logits))
        return np.concatenate(outputs, axis=0)
    return predict


def _labels_at(samples: Sequence[SceneSample], shape: tuple, num_classes: int) -> np.ndarray:
    labels = np.stack([s.label_map for s in samples]).astype(np.int64)
    if labels.shape == shape:
        return labels
    if len(shape) != 3 or shape[0] != labels.shape[0] or labels.shape[1] % shape[1] or labels.shape[1] // shape[1] != labels.shape[2] // shape[2]:
        raise ShapeError(f"prediction shape {shape} cannot be compared with labels {labels.shape}")
    return downsample_labels(labels, num_classes, labels.shape[1] // shape[1])


def evaluate_subset(subset: Subset, samples: Sequence[SceneSample], num_classes: int,
                    predict_fn: PredictFn) -> SubsetResult:
    pred = np.asarray(predict_fn(subset, samples))
    if pred.size == 0:
        raise EmptyPredictionError(f"subset {''.join(subset)} produced an empty prediction",
                                   {'subset': ''.join(subset)})
    true = _labels_at(samples, pred.shape, num_classes)
    iou, miou = compute_miou(pred, true, num_classes)
    return SubsetResult(tuple(subset), iou, miou)


def evaluate_anymodal(params: Optional[SegmentorParams], samples: Sequence[SceneSample], modalities: Sequence[str],
                      predict_fn: Optional[PredictFn] = None, workers: int = 1,
                      num_classes: Optional[int] = None) -> EvalTable:
    """
    Evaluate every non-empty modality subset on the held-out samples.

    IoU counts accumulate over all samples of a subset. Subsets may run on
    a thread pool; rows are merged in subset order regardless.

    Args:
        params: segmentor to evaluate (unused when predict_fn is given)
        predict_fn: optional (subset, samples) -> label grids replacing the model
        workers: threads evaluating subsets concurrently
    """
    if not samples:
        raise EmptyPredictionError("no held-out samples to evaluate")
    if predict_fn is None:
        if params is None:
            raise ConfigError("evaluate_anymodal needs params or a predict_fn")
        predict_fn = model_predictor(params)
    if num_classes is None:
        if params is None:
            raise ConfigError("evaluate_anymodal needs num_classes when no params are given")
        num_classes = params.num_classes
    subsets = modality_subsets(modalities)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: evaluate_subset(s, samples, num_classes, predict_fn), subsets))
    else:
        results = [evaluate_subset(s, samples, num_classes, predict_fn) for s in subsets]

    table = EvalTable(list(modalities), num_classes)
    for result in results:
        table.rows[result.name] = result
    logger.info(f"Anymodal evaluation over {len(subsets)} subsets: mean mIoU {100 * table.mean:.2f}")
    return table


def full_modality_miou(params: SegmentorParams, samples: Sequence[SceneSample], modalities: Sequence[str]) -> float:
    return evaluate_subset(tuple(modalities), samples, params.num_classes, model_predictor(params)).miou


def check_modalities(modalities: Sequence[str], manifest, source: str = '') -> None:
    missing = [m for m in modalities if m not in manifest.modalities]
    if missing:
        raise ConfigError(f"dataset lacks modalities {missing} (it holds {''.join(manifest.modalities)})",
                          {'dataset': source, 'missing': missing})


def check_compatible(params: SegmentorParams, manifest) -> None:
    """Checkpoint and dataset must agree on classes, modalities and spatial divisibility"""
    if params.num_classes != manifest.num_classes:
        raise ShapeError(f"checkpoint predicts {params.num_classes} classes, dataset has K={manifest.num_classes}")
    divisor = params.merge_factor ** 4
    if manifest.h % divisor or manifest.w % divisor:
        raise ShapeError(f"dataset extents {manifest.h}x{manifest.w} not divisible by {divisor}")
