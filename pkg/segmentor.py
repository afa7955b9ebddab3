"""
Weight-shared multi-scale segmentor

Four encoder stages of (patch-merge -> affine channel mix -> GELU), mean
fusion of per-modality stage features, and a linear decoder that
aggregates the stages at stage-1 resolution before a per-position
classifier. Teacher and student use the same architecture.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from error_handler import ShapeError

logger = logging.getLogger(__name__)

NUM_STAGES = 4
IMAGE_CHANNELS = 3
# Canonical modality order; fusion sums in this order so it is order-independent
MODALITY_ORDER = ('R', 'F', 'D', 'E', 'L')

MultiScaleFeatures = Dict[str, List[Tensor]]


def canonical_order(modalities) -> List[str]:
    def key(m):
        return (MODALITY_ORDER.index(m), m) if m in MODALITY_ORDER else (len(MODALITY_ORDER), m)
    return sorted(modalities, key=key)


class SegmentorParams:
    """Named parameter tensors of one segmentor plus its shape description"""

    def __init__(self, tensors: Mapping[str, Tensor], channels: Sequence[int], decoder_channels: int,
                 num_classes: int, merge_factor: int = 2, frozen: bool = False):
        if len(channels) != NUM_STAGES:
            raise ShapeError(f"segmentor needs exactly {NUM_STAGES} stages, got {len(channels)}")
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict(tensors)
        self.channels = [int(c) for c in channels]
        self.decoder_channels = int(decoder_channels)
        self.num_classes = int(num_classes)
        self.merge_factor = int(merge_factor)
        self.frozen = False
        if frozen:
            self.freeze()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def shape_config(self) -> dict:
        return {
            'channels': list(self.channels),
            'decoder_channels': self.decoder_channels,
            'num_classes': self.num_classes,
            'merge_factor': self.merge_factor,
        }

    def freeze(self):
        """Mark as a frozen teacher: no tensor requires grad any more"""
        self.frozen = True
        for tensor in self.tensors.values():
            tensor.requires_grad = False
            tensor.grad = None

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.grad = None

    def astype(self, dtype) -> "SegmentorParams":
        tensors = OrderedDict(
            (name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name))
            for name, t in self.tensors.items()
        )
        return SegmentorParams(tensors, self.channels, self.decoder_channels, self.num_classes,
                               self.merge_factor, self.frozen)

    def copy(self) -> "SegmentorParams":
        return self.astype(self.dtype)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def param_shapes(channels: Sequence[int], decoder_channels: int, num_classes: int,
                 merge_factor: int = 2) -> "OrderedDict[str, tuple]":
    """Parameter name -> (shape, fan_in), in storage order"""
    shapes = OrderedDict()
    in_channels = IMAGE_CHANNELS
    for i, out_channels in enumerate(channels, start=1):
        fan_in = in_channels * merge_factor * merge_factor
        shapes[f'stage{i}.weight'] = ((fan_in, out_channels), fan_in)
        shapes[f'stage{i}.bias'] = ((1, out_channels), fan_in)
        in_channels = out_channels
    for i, stage_channels in enumerate(channels, start=1):
        shapes[f'decoder{i}.weight'] = ((stage_channels, decoder_channels), stage_channels)
        shapes[f'decoder{i}.bias'] = ((1, decoder_channels), stage_channels)
    shapes['classifier.weight'] = ((decoder_channels, num_classes), decoder_channels)
    shapes['classifier.bias'] = ((1, num_classes), decoder_channels)
    return shapes


def init_params(channels: Sequence[int], decoder_channels: int, num_classes: int, seed: int,
                merge_factor: int = 2, dtype=np.float32) -> SegmentorParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization from a seed"""
    if len(channels) != NUM_STAGES:
        raise ShapeError(f"segmentor needs exactly {NUM_STAGES} stages, got {len(channels)}")
    rng = np.random.default_rng(seed)
    named = OrderedDict()
    for name, (shape, fan_in) in param_shapes(channels, decoder_channels, num_classes, merge_factor).items():
        named[name] = Tensor(_uniform(rng, shape, fan_in, dtype), requires_grad=True, name=name)
    return SegmentorParams(named, channels, decoder_channels, num_classes, merge_factor)


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Rows of x times weight plus bias, as [x | 1] @ [weight; bias] (no broadcasting)"""
    ones = ad.constant(np.ones((x.shape[0], 1)), like=x)
    return ad.matmul(ad.concat([x, ones], axis=1), ad.concat([weight, bias], axis=0))


def _as_tensor(image, dtype) -> Tensor:
    if isinstance(image, Tensor):
        return image
    return Tensor(np.asarray(image), dtype=dtype)


def encode(modality_image: Union[Tensor, np.ndarray], params: SegmentorParams) -> List[Tensor]:
    """
    Encode one modality image (h, w, 3) or batch (B, h, w, 3) into 4 stage features.

    Stage i has shape (..., h / f^i, w / f^i, C_i) with f the merge factor.
    """
    x = _as_tensor(modality_image, params.dtype)
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"encode expects (h, w, 3) or (B, h, w, 3), got {x.shape}")
    *lead, h, w, c = x.shape
    divisor = params.merge_factor ** NUM_STAGES
    if h % divisor or w % divisor:
        raise ShapeError(f"encode: spatial extents {h}x{w} must be divisible by {divisor}",
                         {'shape': list(x.shape)})
    if c != IMAGE_CHANNELS:
        raise ShapeError(f"encode: expected {IMAGE_CHANNELS} channels, got {c}", {'shape': list(x.shape)})

    features = []
    for i, out_channels in enumerate(params.channels, start=1):
        x = ad.patch_merge(x, params.merge_factor)
        *lead, h, w, c = x.shape
        rows = int(np.prod(lead, dtype=np.int64)) * h * w
        y = _affine(ad.reshape(x, (rows, c)), params[f'stage{i}.weight'], params[f'stage{i}.bias'])
        x = ad.gelu(ad.reshape(y, (*lead, h, w, out_channels)))
        features.append(x)
    return features


def encode_modalities(images: Mapping[str, np.ndarray], params: SegmentorParams,
                      modalities: Optional[Sequence[str]] = None) -> MultiScaleFeatures:
    """Shared-weight encoding of every requested modality"""
    selected = list(images) if modalities is None else list(modalities)
    return {m: encode(images[m], params) for m in selected}


def pml_fuse(features: MultiScaleFeatures) -> List[Tensor]:
    """Per-stage element-wise mean over the present modalities"""
    if not features:
        raise ShapeError("pml_fuse needs at least one modality")
    order = canonical_order(features)
    reference = features[order[0]]
    for m in order[1:]:
        stages = features[m]
        if len(stages) != len(reference) or any(a.shape != b.shape for a, b in zip(stages, reference)):
            raise ShapeError(f"pml_fuse: modality {m} stage shapes differ from {order[0]}",
                             {'modality': m, 'shapes': [list(s.shape) for s in stages],
                              'reference': [list(s.shape) for s in reference]})
    if len(order) == 1:
        return list(reference)

    fused = []
    for stage in range(len(reference)):
        total = features[order[0]][stage]
        for m in order[1:]:
            total = ad.add(total, features[m][stage])
        fused.append(ad.scale(total, 1.0 / len(order)))
    return fused


def decode(stage_features: Sequence[Tensor], params: SegmentorParams) -> Tensor:
    """Project, upsample to stage-1 resolution, average and classify into K logits"""
    if len(stage_features) != NUM_STAGES:
        raise ShapeError(f"decode needs {NUM_STAGES} stages, got {len(stage_features)}")
    *lead, h0, w0, _ = stage_features[0].shape
    lead_rows = int(np.prod(lead, dtype=np.int64))

    aggregate = None
    for i, feat in enumerate(stage_features, start=1):
        *_, h, w, c = feat.shape
        if c != params.channels[i - 1]:
            raise ShapeError(f"decode: stage {i} has {c} channels, expected {params.channels[i - 1]}")
        if h0 % h or w0 % w or h0 // h != w0 // w:
            raise ShapeError(f"decode: stage {i} extent {h}x{w} does not divide stage-1 extent {h0}x{w0}")
        proj = _affine(ad.reshape(feat, (lead_rows * h * w, c)),
                       params[f'decoder{i}.weight'], params[f'decoder{i}.bias'])
        proj = ad.reshape(proj, (*lead, h, w, params.decoder_channels))
        if h0 // h > 1:
            proj = ad.upsample(proj, h0 // h)
        aggregate = proj if aggregate is None else ad.add(aggregate, proj)

    aggregate = ad.scale(aggregate, 1.0 / NUM_STAGES)
    logits = _affine(ad.reshape(aggregate, (lead_rows * h0 * w0, params.decoder_channels)),
                     params['classifier.weight'], params['classifier.bias'])
    return ad.reshape(logits, (*lead, h0, w0, params.num_classes))


def predict_probs(logits: Tensor) -> Tensor:
    """Softmax over the class axis at every position"""
    if logits.data.ndim < 1:
        raise ShapeError(f"predict_probs expects (..., K) logits, got {logits.shape}")
    return ad.softmax(logits, axis=-1)


def predict_labels(logits: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Argmax class per position; ties go to the lowest class index"""
    array = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(array, axis=-1)


@dataclass
class SegmentOutput:
    features: MultiScaleFeatures
    fused: List[Tensor]
    logits: Tensor
    probs: Tensor


def segment(images: Mapping[str, np.ndarray], params: SegmentorParams,
            modalities: Sequence[str]) -> SegmentOutput:
    """encode -> pml_fuse -> decode -> predict_probs for one set of active modalities"""
    features = encode_modalities(images, params, modalities)
    fused = pml_fuse(features)
    logits = decode(fused, params)
    return SegmentOutput(features, fused, logits, predict_probs(logits))


def downsample_labels(labels: np.ndarray, num_classes: int, factor: int = 2) -> np.ndarray:
    """Majority vote per factor x factor block; ties go to the lowest class index"""
    labels = np.asarray(labels)
    *lead, h, w = labels.shape
    if h % factor or w % factor:
        raise ShapeError(f"label map {h}x{w} not divisible by {factor}")
    one_hot = np.eye(num_classes, dtype=np.int32)[labels]
    counts = one_hot.reshape(*lead, h // factor, factor, w // factor, factor, num_classes).sum(axis=(-4, -2))
    return np.argmax(counts, axis=-1)
