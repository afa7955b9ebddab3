"""
Synthetic multi-sensor scenes

Voronoi label maps rendered into modalities of unequal difficulty:
R/F (per-class colour) and D (per-class intensity ramp) are dense and easy,
E (sparse class boundaries) and L (depth sampled at a few pixels) are hard.
Datasets persist to a single binary file with per-sample checksums.
"""
import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from error_handler import CorruptFileError, ShapeError

logger = logging.getLogger(__name__)

DATA_HEADER = b'ANYSEG-DATA v1\n'
GENERATOR_VERSION = 2
CHECKSUM_BYTES = 8
SPATIAL_DIVISOR = 16
MODALITY_KINDS = ('R', 'F', 'D', 'E', 'L')
DEFAULT_MODALITIES = ('R', 'D', 'E', 'L')
PALETTE_SEED = 20240521
PALETTE_SIZE = 256


@dataclass(frozen=True)
class RenderSettings:
    noise_sigma: float = 0.05
    event_drop: float = 0.3
    lidar_density: float = 0.15


@dataclass
class SceneSample:
    label_map: np.ndarray
    modality_images: Dict[str, np.ndarray]
    seed: int


@dataclass
class DatasetManifest:
    sample_count: int
    h: int
    w: int
    num_classes: int
    modalities: List[str] = field(default_factory=lambda: list(DEFAULT_MODALITIES))
    generator_version: int = GENERATOR_VERSION
    global_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        try:
            return cls(
                sample_count=int(data['sample_count']),
                h=int(data['h']),
                w=int(data['w']),
                num_classes=int(data['num_classes']),
                modalities=[str(m) for m in data['modalities']],
                generator_version=int(data['generator_version']),
                global_seed=int(data['global_seed']),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptFileError(f"dataset manifest invalid: {e}")

    def validate(self):
        problems = []
        if self.sample_count < 0:
            problems.append("sample_count < 0")
        if self.h <= 0 or self.w <= 0:
            problems.append(f"non-positive extent {self.h}x{self.w}")
        if not 2 <= self.num_classes <= 256:
            problems.append(f"num_classes {self.num_classes} outside [2, 256]")
        if not self.modalities or any(m not in MODALITY_KINDS for m in self.modalities):
            problems.append(f"modalities {self.modalities} not a subset of {MODALITY_KINDS}")
        if len(set(self.modalities)) != len(self.modalities):
            problems.append("duplicate modality")
        if problems:
            raise CorruptFileError(f"dataset manifest invalid: {'; '.join(problems)}")


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed RGB colour per class, independent of how many classes a dataset uses"""
    palette = np.random.default_rng(PALETTE_SEED).uniform(0.15, 0.85, size=(PALETTE_SIZE, 3))
    return palette[:num_classes]


def depth_levels(num_classes: int) -> np.ndarray:
    """Per-class intensity ramp in [0.2, 0.8]"""
    if num_classes == 1:
        return np.array([0.5])
    return np.linspace(0.2, 0.8, num_classes)


def voronoi_labels(anchors: Sequence[Tuple[int, int]], h: int, w: int) -> np.ndarray:
    """Nearest-anchor partition; anchor j labels class j, ties go to the lower index"""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = (yy[..., None] - anchors[:, 0]) ** 2 + (xx[..., None] - anchors[:, 1]) ** 2
    return np.argmin(dist, axis=-1).astype(np.uint8)


def _boundaries(label_map: np.ndarray) -> np.ndarray:
    edge = np.zeros(label_map.shape, dtype=bool)
    vertical = label_map[1:, :] != label_map[:-1, :]
    horizontal = label_map[:, 1:] != label_map[:, :-1]
    edge[1:, :] |= vertical
    edge[:-1, :] |= vertical
    edge[:, 1:] |= horizontal
    edge[:, :-1] |= horizontal
    return edge


def _replicate(plane: np.ndarray) -> np.ndarray:
    return np.repeat(plane[..., None], 3, axis=-1)


def noisy_depth(label_map: np.ndarray, noise_source: np.random.Generator, num_classes: int,
                settings: Optional[RenderSettings] = None) -> np.ndarray:
    """Per-class depth plus Gaussian noise, unclipped (h, w)"""
    sigma = (settings or RenderSettings()).noise_sigma
    h, w = label_map.shape
    return depth_levels(num_classes)[label_map] + noise_source.normal(0.0, sigma, size=(h, w)) * (sigma > 0)


def render_modality(label_map: np.ndarray, kind: str, noise_source: np.random.Generator,
                    num_classes: Optional[int] = None, settings: Optional[RenderSettings] = None,
                    depth: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Render one modality as an (h, w, 3) float32 image in [0, 1].

    L samples a depth plane at the configured density. When depth is given
    (the plane behind D) it is masked as is; otherwise a plane is drawn
    from noise_source first.
    """
    settings = settings or RenderSettings()
    label_map = np.asarray(label_map)
    num_classes = int(label_map.max()) + 1 if num_classes is None else num_classes
    h, w = label_map.shape
    sigma = settings.noise_sigma

    if kind in ('R', 'F'):
        image = class_palette(num_classes)[label_map] + noise_source.normal(0.0, sigma, size=(h, w, 3)) * (sigma > 0)
    elif kind in ('D', 'L'):
        if depth is None:
            depth = noisy_depth(label_map, noise_source, num_classes, settings)
        elif depth.shape != (h, w):
            raise ShapeError(f"depth plane {depth.shape} does not match the label map {(h, w)}")
        if kind == 'L':
            keep = np.zeros(h * w, dtype=bool)
            keep[noise_source.choice(h * w, size=int(round(settings.lidar_density * h * w)), replace=False)] = True
            depth = np.where(keep.reshape(h, w), depth, 0.0)
        image = _replicate(depth)
    elif kind == 'E':
        edges = _boundaries(label_map) & (noise_source.random((h, w)) >= settings.event_drop)
        image = _replicate(edges.astype(np.float64))
    else:
        raise ValueError(f"unknown modality kind '{kind}', expected one of {MODALITY_KINDS}")

    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _modality_stream(seed: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1 + MODALITY_KINDS.index(kind)])


def generate_scene(seed: int, h: int, w: int, num_classes: int,
                   modalities: Sequence[str] = DEFAULT_MODALITIES,
                   settings: Optional[RenderSettings] = None) -> SceneSample:
    """Label map from num_classes seeded anchors; every modality has its own seeded stream, L reuses D's depth"""
    if h % SPATIAL_DIVISOR or w % SPATIAL_DIVISOR:
        raise ShapeError(f"scene extents {h}x{w} must be divisible by {SPATIAL_DIVISOR}")
    if not 2 <= num_classes <= 256:
        raise ValueError(f"num_classes must be in [2, 256], got {num_classes}")
    if num_classes > h * w:
        raise ValueError(f"num_classes {num_classes} exceeds the {h * w} pixels of the scene")
    if seed < 0:
        raise ValueError("scene seed must be non-negative")

    rng = np.random.default_rng([int(seed), 0])
    flat = rng.choice(h * w, size=num_classes, replace=False)
    anchors = np.stack(np.divmod(flat, w), axis=-1)
    label_map = voronoi_labels(anchors, h, w)
    # L masks the same depth plane that D shows
    depth = noisy_depth(label_map, _modality_stream(seed, 'D'), num_classes, settings)
    images = {}
    for m in modalities:
        plane = depth if m in ('D', 'L') else None
        images[m] = render_modality(label_map, m, _modality_stream(seed, m), num_classes, settings, plane)
    return SceneSample(label_map, images, int(seed))


def sample_seeds(global_seed: int, count: int) -> List[int]:
    """64-bit per-sample seeds derived from the dataset seed"""
    state = np.random.SeedSequence(global_seed).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def generate_dataset(num_samples: int, h: int, w: int, num_classes: int,
                     modalities: Sequence[str] = DEFAULT_MODALITIES, global_seed: int = 0,
                     settings: Optional[RenderSettings] = None) -> Tuple[List[SceneSample], DatasetManifest]:
    samples = [generate_scene(s, h, w, num_classes, modalities, settings) for s in sample_seeds(global_seed, num_samples)]
    manifest = DatasetManifest(num_samples, h, w, num_classes, list(modalities), GENERATOR_VERSION, global_seed)
    logger.info(f"Generated {num_samples} scenes ({h}x{w}, K={num_classes}, modalities={''.join(modalities)})")
    return samples, manifest


def _record_size(manifest: DatasetManifest) -> int:
    pixels = manifest.h * manifest.w
    return 8 + pixels + len(manifest.modalities) * pixels * 3 * 4


def _encode_sample(sample: SceneSample, manifest: DatasetManifest, index: int) -> bytes:
    if sample.label_map.shape != (manifest.h, manifest.w):
        raise ShapeError(f"sample {index}: label map {sample.label_map.shape} does not match manifest",
                         {'sample': index})
    buffer = io.BytesIO()
    buffer.write(struct.pack('<Q', sample.seed))
    buffer.write(np.ascontiguousarray(sample.label_map, dtype=np.uint8).tobytes())
    for m in manifest.modalities:
        image = sample.modality_images.get(m)
        if image is None or image.shape != (manifest.h, manifest.w, 3):
            raise ShapeError(f"sample {index}: modality {m} missing or mis-shaped", {'sample': index})
        buffer.write(np.ascontiguousarray(image, dtype='<f4').tobytes())
    record = buffer.getvalue()
    return record + hashlib.blake2b(record, digest_size=CHECKSUM_BYTES).digest()


def write_dataset(samples: Sequence[SceneSample], manifest: DatasetManifest, path: str) -> str:
    """Write atomically; refuses samples that disagree with the manifest"""
    manifest.validate()
    if manifest.sample_count != len(samples):
        raise ShapeError(f"manifest declares {manifest.sample_count} samples, got {len(samples)}")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temp_path = f"{path}.tmp"
    try:
        with open(temp_path, 'wb') as f:
            f.write(DATA_HEADER)
            f.write(json.dumps(manifest.to_dict(), sort_keys=True).encode('utf-8') + b'\n')
            for index, sample in enumerate(samples):
                f.write(_encode_sample(sample, manifest, index))
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logger.info(f"Dataset written: {path} ({len(samples)} samples)")
    return path


def read_dataset(path: str) -> Tuple[List[SceneSample], DatasetManifest]:
    """Read and validate every sample; any defect rejects the whole file"""
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(DATA_HEADER):
        raise CorruptFileError(f"{path}: not a dataset file (bad header line)")
    stream = io.BytesIO(data[len(DATA_HEADER):])
    try:
        manifest = DatasetManifest.from_dict(json.loads(stream.readline().decode('utf-8')))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"{path}: manifest unreadable: {e}")
    manifest.validate()

    h, w, pixels = manifest.h, manifest.w, manifest.h * manifest.w
    record_size = _record_size(manifest)
    samples = []
    seen = np.zeros(manifest.num_classes, dtype=bool)
    for index in range(manifest.sample_count):
        chunk = stream.read(record_size + CHECKSUM_BYTES)
        if len(chunk) != record_size + CHECKSUM_BYTES:
            raise CorruptFileError(f"{path}: truncated at sample {index}", {'sample': index})
        record, digest = chunk[:record_size], chunk[record_size:]
        if hashlib.blake2b(record, digest_size=CHECKSUM_BYTES).digest() != digest:
            raise CorruptFileError(f"{path}: checksum mismatch at sample {index}", {'sample': index})

        (seed,) = struct.unpack('<Q', record[:8])
        labels = np.frombuffer(record[8:8 + pixels], dtype=np.uint8).reshape(h, w).copy()
        if labels.max() >= manifest.num_classes:
            raise CorruptFileError(f"{path}: sample {index} has label {labels.max()} >= K={manifest.num_classes}",
                                   {'sample': index})
        seen[np.unique(labels)] = True
        images = {}
        offset = 8 + pixels
        for m in manifest.modalities:
            size = pixels * 3 * 4
            images[m] = np.frombuffer(record[offset:offset + size], dtype='<f4').astype(np.float32).reshape(h, w, 3)
            offset += size
        samples.append(SceneSample(labels, images, seed))

    if stream.read(1):
        raise CorruptFileError(f"{path}: trailing bytes after {manifest.sample_count} samples")
    if manifest.sample_count and not seen.all():
        missing = [int(k) for k in np.flatnonzero(~seen)]
        raise CorruptFileError(f"{path}: classes {missing} never occur although the manifest declares K={manifest.num_classes}")
    logger.info(f"Dataset read: {path} ({len(samples)} samples)")
    return samples, manifest


def stack_batch(samples: Sequence[SceneSample], modalities: Sequence[str]) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Batch arrays: modality -> (B, h, w, 3) and labels (B, h, w)"""
    images = {m: np.stack([s.modality_images[m] for s in samples]) for m in modalities}
    labels = np.stack([s.label_map for s in samples]).astype(np.int64)
    return images, labels


def class_frequencies(samples: Sequence[SceneSample], num_classes: int) -> np.ndarray:
    """Mean per-sample pixel share of each class"""
    shares = [np.bincount(s.label_map.reshape(-1), minlength=num_classes) / s.label_map.size for s in samples]
    return np.mean(shares, axis=0)


def split_holdout(samples: Sequence[SceneSample], holdout_fraction: float) -> Tuple[List[SceneSample], List[SceneSample]]:
    """(train, held-out): the last round(fraction * N) samples are held out, at least one on each side"""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples to split, got {len(samples)}")
    held = min(len(samples) - 1, max(1, int(round(holdout_fraction * len(samples)))))
    return list(samples[:-held]), list(samples[-held:])
