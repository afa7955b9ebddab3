"""
Training objectives for the teacher and the anymodal student

Supervised cross-entropy, unimodal feature distillation, cross-modal
correspondence distillation, modality-agnostic prediction distillation,
their weighted total, anymodal dropout masks and the fused-feature KD
variant used as a counter-experiment. Teacher operands are always
detached; gradients flow into student tensors only.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import LOG_EPS, Tensor
from error_handler import ConfigError, LabelRangeError, ShapeError
from segmentor import MultiScaleFeatures

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModalityMask:
    """Active modalities of one sample, in modality-list order; never empty"""
    modalities: Tuple[str, ...]

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("a modality mask must keep at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modality in mask {self.modalities}")

    @property
    def name(self) -> str:
        return ''.join(self.modalities)

    def __iter__(self):
        return iter(self.modalities)

    def __len__(self):
        return len(self.modalities)

    def __contains__(self, modality):
        return modality in self.modalities


@dataclass(frozen=True)
class LossWeights:
    lambda_mad: float = 50.0
    alpha: float = 5.0
    beta: float = 10.0
    fused_kd: float = 0.0

    def __post_init__(self):
        for name in ('lambda_mad', 'alpha', 'beta', 'fused_kd'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {value}")

    def with_toggles(self, mad: bool = True, umd: bool = True, cmd: bool = True,
                     fused_kd: bool = False) -> "LossWeights":
        """Weights with disabled terms set to zero"""
        return LossWeights(
            lambda_mad=self.lambda_mad if mad else 0.0,
            alpha=self.alpha if umd else 0.0,
            beta=self.beta if cmd else 0.0,
            fused_kd=self.fused_kd if fused_kd else 0.0,
        )


@dataclass
class LossReport:
    sup: float = 0.0
    mad: float = 0.0
    umd: float = 0.0
    cmd: float = 0.0
    fused: float = 0.0
    total: float = 0.0
    cmd_pairs: Dict[str, float] = field(default_factory=dict)
    diagnostics: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_components(cls, weights: LossWeights, sup: float, mad: float = 0.0, umd: float = 0.0,
                        cmd: float = 0.0, fused: float = 0.0, cmd_pairs: Optional[dict] = None,
                        diagnostics: Optional[dict] = None) -> "LossReport":
        total = sup + weights.lambda_mad * mad + weights.alpha * umd + weights.beta * cmd + weights.fused_kd * fused
        return cls(sup, mad, umd, cmd, fused, total, dict(cmd_pairs or {}), dict(diagnostics or {}))

    def identity_error(self, weights: LossWeights) -> float:
        expected = (self.sup + weights.lambda_mad * self.mad + weights.alpha * self.umd
                    + weights.beta * self.cmd + weights.fused_kd * self.fused)
        return abs(self.total - expected)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.sup, self.mad, self.umd, self.cmd, self.fused, self.total))

    def as_dict(self) -> dict:
        return {
            'sup': self.sup, 'mad': self.mad, 'umd': self.umd, 'cmd': self.cmd,
            'fused': self.fused, 'total': self.total,
            'cmd_pairs': dict(sorted(self.cmd_pairs.items())),
            'diagnostics': dict(sorted(self.diagnostics.items())),
        }


def supervised_ce(probs: Tensor, labels: np.ndarray) -> Tensor:
    """-(1/N) * sum_i log probs[i, y_i] over the N label positions"""
    labels = np.asarray(labels)
    num_classes = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise ShapeError(f"supervised_ce: labels {labels.shape} do not match probs {probs.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelRangeError(f"labels must be integers, got {labels.dtype}")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        position = tuple(int(i) for i in np.unravel_index(bad[0], labels.shape))
        raise LabelRangeError(f"label {int(labels.reshape(-1)[bad[0]])} at position {position} outside [0, {num_classes})",
                              {'position': list(position)})

    one_hot = ad.constant(np.eye(num_classes)[labels], like=probs)
    log_likelihood = ad.sum_over(ad.mul(one_hot, ad.log_clamped(probs)))
    return ad.scale(log_likelihood, -1.0 / labels.size)


def anymodal_dropout(rng: np.random.Generator, modalities: Sequence[str]) -> ModalityMask:
    """Uniformly random non-empty subset of the modalities"""
    if len(modalities) < 1:
        raise ValueError("anymodal_dropout needs at least one modality")
    code = int(rng.integers(1, 2 ** len(modalities)))
    return ModalityMask(tuple(m for bit, m in enumerate(modalities) if code >> bit & 1))


def draw_masks(rng: np.random.Generator, modalities: Sequence[str], batch_size: int) -> List[ModalityMask]:
    """One independent mask per sample"""
    return [anymodal_dropout(rng, modalities) for _ in range(batch_size)]


def _channel_kl(student: Tensor, teacher: Tensor) -> Tensor:
    """Mean over positions of KL(softmax(student) || softmax(teacher)) along the channel axis"""
    if student.shape != teacher.shape:
        raise ShapeError(f"feature shapes differ: student {student.shape} vs teacher {teacher.shape}")
    p = ad.softmax(student, axis=-1)
    log_ratio = ad.sub(ad.log_softmax(student, axis=-1), ad.log_softmax(teacher.detach(), axis=-1))
    per_position = ad.sum_over(ad.mul(p, log_ratio), axes=-1)
    return ad.mean_over(per_position)


def _sum_terms(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def umd_loss(student_feats: MultiScaleFeatures, teacher_feats: MultiScaleFeatures, mask: ModalityMask) -> Tensor:
    """Per active modality and stage channel-softmax KL, summed over stages, averaged over modalities"""
    for m in mask:
        if m not in student_feats or m not in teacher_feats:
            side = 'student' if m not in student_feats else 'teacher'
            raise ShapeError(f"umd_loss: modality {m} missing from {side} features", {'modality': m})
    extra = set(student_feats) - set(mask.modalities)
    if extra:
        raise ShapeError(f"umd_loss: student features hold inactive modalities {sorted(extra)}")

    terms = []
    for m in mask:
        if len(student_feats[m]) != len(teacher_feats[m]):
            raise ShapeError(f"umd_loss: stage count mismatch for modality {m}")
        terms.extend(_channel_kl(s, t) for s, t in zip(student_feats[m], teacher_feats[m]))
    return ad.scale(_sum_terms(terms), 1.0 / len(mask))


def _similarity_layout(feature: Tensor) -> Tensor:
    """(..., h, w, C) -> (..., C, h*w): one spatial vector per channel"""
    rank = feature.data.ndim
    if rank < 3:
        raise ShapeError(f"cmd_loss expects (..., h, w, C) features, got {feature.shape}")
    lead = list(range(rank - 3))
    *lead_shape, h, w, c = feature.shape
    moved = ad.transpose(feature, lead + [rank - 1, rank - 3, rank - 2])
    return ad.reshape(moved, (*lead_shape, c, h * w))


def _channel_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Per-channel cosine similarity between two modalities, averaged over the batch axes"""
    if a.shape != b.shape:
        raise ShapeError(f"cmd_loss: paired feature shapes differ {a.shape} vs {b.shape}")
    sim = ad.cosine_similarity(_similarity_layout(a), _similarity_layout(b), axis=-1)
    batch_axes = tuple(range(sim.data.ndim - 1))
    return ad.mean_over(sim, axes=batch_axes) if batch_axes else sim


def _zero_norm_channels(a: np.ndarray, b: np.ndarray) -> int:
    na = np.sqrt(np.sum(a * a, axis=(-3, -2)))
    nb = np.sqrt(np.sum(b * b, axis=(-3, -2)))
    return int(np.count_nonzero((na == 0) | (nb == 0)))


def _bernoulli_kl(p: Tensor, q: np.ndarray) -> Tensor:
    """mean_c p log(p/q) + (1-p) log((1-p)/(1-q)); q is a constant"""
    ones = ad.constant(np.ones(p.shape), like=p)
    log_q = ad.constant(np.log(np.maximum(q, LOG_EPS)), like=p)
    log_q_bar = ad.constant(np.log(np.maximum(1.0 - q, LOG_EPS)), like=p)
    p_bar = ad.sub(ones, p)
    positive = ad.mul(p, ad.sub(ad.log_clamped(p), log_q))
    negative = ad.mul(p_bar, ad.sub(ad.log_clamped(p_bar), log_q_bar))
    return ad.mean_over(ad.add(positive, negative))


def _spatial_positions(feature: Tensor) -> int:
    h, w = feature.shape[-3:-1]
    return h * w


def cmd_loss(student_feats: MultiScaleFeatures, teacher_feats: MultiScaleFeatures, mask: ModalityMask,
             diagnostics: Optional[dict] = None) -> Tensor:
    """
    Cross-modal correspondence distillation.

    For every unordered pair of active modalities and every stage, the
    batch-averaged per-channel cosine similarity S is mapped to (S + 1) / 2
    and the student's value is matched to the teacher's with a Bernoulli KL
    averaged over channels. Stages are summed, pairs averaged; one active
    modality gives 0. A stage with a single spatial position has cosine
    +-1 per sample and no gradient, so it is left out of the sum.
    Zero-norm channels count as similarity 0 and are tallied in
    diagnostics['zero_norm_channels']; per-pair values land in
    diagnostics['cmd_pairs'].
    """
    modalities = list(mask)
    reference = student_feats[modalities[0]][0]
    if len(modalities) < 2:
        return ad.constant(np.zeros(()), like=reference)

    pair_terms = []
    zero_norm = 0
    pair_values = {}
    for m, n in itertools.combinations(modalities, 2):
        for side, feats in (('student', student_feats), ('teacher', teacher_feats)):
            if m not in feats or n not in feats:
                raise ShapeError(f"cmd_loss: pair {m}{n} missing from {side} features")
        stage_terms = []
        for i, (sm, sn) in enumerate(zip(student_feats[m], student_feats[n])):
            if _spatial_positions(sm) < 2:
                continue
            tm, tn = teacher_feats[m][i].detach(), teacher_feats[n][i].detach()
            student_sim = _channel_similarity(sm, sn)
            teacher_sim = _channel_similarity(tm, tn).data
            normalized = ad.scale(ad.add(student_sim, ad.constant(np.ones(student_sim.shape), like=student_sim)), 0.5)
            stage_terms.append(_bernoulli_kl(normalized, (teacher_sim.astype(np.float64) + 1.0) / 2.0))
            zero_norm += _zero_norm_channels(sm.data, sn.data) + _zero_norm_channels(tm.data, tn.data)
        pair_term = _sum_terms(stage_terms) if stage_terms else ad.constant(np.zeros(()), like=reference)
        pair_values[f'{m}{n}'] = pair_term.item()
        pair_terms.append(pair_term)

    if diagnostics is not None:
        diagnostics['zero_norm_channels'] = diagnostics.get('zero_norm_channels', 0) + zero_norm
        pairs = diagnostics.setdefault('cmd_pairs', {})
        for key, value in pair_values.items():
            pairs[key] = pairs.get(key, 0.0) + value
    if zero_norm:
        logger.debug(f"cmd_loss: {zero_norm} zero-norm channel vectors treated as similarity 0")
    return ad.scale(_sum_terms(pair_terms), 1.0 / len(pair_terms))


def mad_loss(student_probs: Tensor, teacher_probs: Tensor) -> Tensor:
    """Mean per-position KL(student || teacher) over class distributions; teacher detached"""
    if student_probs.shape != teacher_probs.shape:
        raise ShapeError(f"mad_loss: shape mismatch {student_probs.shape} vs {teacher_probs.shape}")
    log_ratio = ad.sub(ad.log_clamped(student_probs), ad.log_clamped(teacher_probs.detach()))
    per_position = ad.sum_over(ad.mul(student_probs, log_ratio), axes=-1)
    return ad.mean_over(per_position)


def fused_kd_loss(student_fused: Sequence[Tensor], teacher_fused: Sequence[Tensor]) -> Tensor:
    """Channel-softmax KL between fused student and fused teacher features, summed over stages"""
    if len(student_fused) != len(teacher_fused) or not student_fused:
        raise ShapeError(f"fused_kd_loss: stage mismatch {len(student_fused)} vs {len(teacher_fused)}")
    return _sum_terms([_channel_kl(s, t) for s, t in zip(student_fused, teacher_fused)])


@dataclass
class LossComponents:
    sup: Tensor
    mad: Optional[Tensor] = None
    umd: Optional[Tensor] = None
    cmd: Optional[Tensor] = None
    fused: Optional[Tensor] = None


def total_loss(components: LossComponents, weights: LossWeights) -> Tensor:
    """sup + lambda*mad + alpha*umd + beta*cmd (+ fused_kd*fused); zero-weight terms are skipped"""
    total = components.sup
    for term, weight in ((components.mad, weights.lambda_mad), (components.umd, weights.alpha),
                         (components.cmd, weights.beta), (components.fused, weights.fused_kd)):
        if term is None or weight == 0:
            continue
        total = ad.add(total, ad.scale(term, weight))
    return total
