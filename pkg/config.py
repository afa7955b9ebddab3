"""
Configuration management for anymodal segmentation experiments
"""
import os
from collections import OrderedDict
from typing import Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from distill_losses import LossWeights
from error_handler import ConfigError
from input_validator import InputValidator

# Load environment variables from .env file
load_dotenv()

ENV_PREFIX = 'ANYMODAL_'


def _parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str_list(text) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    return [t.strip() for t in str(text).split(',') if t.strip()]


def _parse_int_list(text) -> List[int]:
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in _parse_str_list(text)]


def _parse_bool_value(value) -> bool:
    return value if isinstance(value, bool) else _parse_bool(value)


def _parse_int(value) -> int:
    if isinstance(value, bool):
        raise ValueError(f"not an integer: {value!r}")
    return int(value)


# key -> (parser, default)
FIELDS = OrderedDict([
    ('DATASET_PATH', (str, 'data/train.anyseg')),
    ('EVAL_DATASET_PATH', (str, '')),
    ('OUTPUT_DIR', (str, 'runs')),
    ('IMAGE_SIZE', (_parse_int, 16)),
    ('NUM_CLASSES', (_parse_int, 4)),
    ('MODALITIES', (_parse_str_list, ['R', 'D', 'E', 'L'])),
    ('CHANNELS', (_parse_int_list, [8, 16, 24, 32])),
    ('DECODER_CHANNELS', (_parse_int, 16)),
    ('MERGE_FACTOR', (_parse_int, 2)),
    ('NUM_SAMPLES', (_parse_int, 200)),
    ('HOLDOUT_FRACTION', (float, 0.2)),
    ('LEARNING_RATE', (float, 6e-5)),
    ('POWER', (float, 0.9)),
    ('WARMUP_FRACTION', (float, 0.05)),
    ('WARMUP_RATIO', (float, 0.1)),
    ('WEIGHT_DECAY', (float, 0.0)),
    ('EPOCHS', (_parse_int, 60)),
    ('BATCH_SIZE', (_parse_int, 8)),
    ('LAMBDA_MAD', (float, 50.0)),
    ('ALPHA', (float, 5.0)),
    ('BETA', (float, 10.0)),
    ('FUSED_KD_WEIGHT', (float, 1.0)),
    ('ENABLE_MAD', (_parse_bool_value, True)),
    ('ENABLE_UMD', (_parse_bool_value, True)),
    ('ENABLE_CMD', (_parse_bool_value, True)),
    ('ENABLE_FUSED_KD', (_parse_bool_value, False)),
    ('SEED', (_parse_int, 0)),
    ('DATA_SEED', (_parse_int, 1234)),
    ('EVAL_WORKERS', (_parse_int, 1)),
    ('NOISE_SIGMA', (float, 0.05)),
    ('EVENT_DROP', (float, 0.3)),
    ('LIDAR_DENSITY', (float, 0.15)),
])


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ','.join(str(v) for v in value)
    return str(value)


class ExperimentConfig:
    """Configuration of one experiment: data, model shape, schedule, loss weights and seeds"""

    def __init__(self, values: Optional[Dict[str, object]] = None, use_env: bool = True):
        raw = {key: default for key, (_, default) in FIELDS.items()}
        if use_env:
            for key in FIELDS:
                env_value = os.getenv(f'{ENV_PREFIX}{key}')
                if env_value is not None:
                    raw[key] = env_value
        for key, value in (values or {}).items():
            key = key.upper()
            if key not in FIELDS:
                raise ConfigError(f"unknown config key {key}", {'key': key})
            if value is not None:
                raw[key] = value

        for key, (parser, _) in FIELDS.items():
            try:
                setattr(self, key, parser(raw[key]))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"config key {key}: {e}", {'key': key, 'value': str(raw[key])})

    @classmethod
    def from_file(cls, path: str, use_env: bool = False) -> "ExperimentConfig":
        """Read a dotenv-format config file; unknown keys are rejected"""
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}", {'path': path})
        return cls(dict(dotenv_values(path)), use_env=use_env)

    @classmethod
    def full_scale_schedule(cls) -> "ExperimentConfig":
        """Full-scale schedule: 200 epochs, batch 16, 1024 crops, 10 warm-up epochs"""
        return cls({'EPOCHS': 200, 'BATCH_SIZE': 16, 'IMAGE_SIZE': 1024,
                    'CHANNELS': [64, 128, 320, 512], 'DECODER_CHANNELS': 512}, use_env=False)

    def to_dict(self) -> "OrderedDict[str, object]":
        return OrderedDict((key, getattr(self, key)) for key in FIELDS)

    def to_file(self, path: str) -> str:
        """Write every key as KEY=value; from_file(to_file(c)) == c"""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        lines = ['# anymodal segmentation experiment config']
        lines += [f"{key}={_format_value(value)}" for key, value in self.to_dict().items()]
        with open(path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(lines) + '\n')
        return path

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"ExperimentConfig({dict(self.to_dict())})"

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with some keys replaced, e.g. cfg.with_overrides(ENABLE_CMD=False)"""
        values = dict(self.to_dict())
        values.update({k.upper(): v for k, v in overrides.items()})
        return ExperimentConfig(values, use_env=False)

    def validate(self) -> "ExperimentConfig":
        """Raise ConfigError with the first problem found"""
        for is_valid, error in self._checks():
            if not is_valid:
                raise ConfigError(error)
        return self

    def _checks(self):
        v = InputValidator
        yield v.validate_path(self.DATASET_PATH, 'DATASET_PATH')
        yield v.validate_path(self.OUTPUT_DIR, 'OUTPUT_DIR')
        yield v.validate_integer(self.MERGE_FACTOR, 2, 4, 'MERGE_FACTOR')[:2]
        yield v.validate_image_size(self.IMAGE_SIZE, self.MERGE_FACTOR)
        yield v.validate_num_classes(self.NUM_CLASSES, self.IMAGE_SIZE)
        yield v.validate_modalities(self.MODALITIES)
        yield v.validate_channels(self.CHANNELS)
        yield v.validate_integer(self.DECODER_CHANNELS, 1, name='DECODER_CHANNELS')[:2]
        yield v.validate_integer(self.NUM_SAMPLES, 2, name='NUM_SAMPLES')[:2]
        yield v.validate_float(self.HOLDOUT_FRACTION, 0.0, 1.0, 'HOLDOUT_FRACTION', allow_min=False)
        yield v.validate_float(self.LEARNING_RATE, 0.0, None, 'LEARNING_RATE', allow_min=False)
        yield v.validate_float(self.POWER, 0.0, None, 'POWER')
        yield v.validate_float(self.WARMUP_FRACTION, 0.0, 1.0, 'WARMUP_FRACTION')
        yield v.validate_float(self.WARMUP_RATIO, 0.0, 1.0, 'WARMUP_RATIO', allow_min=False)
        yield v.validate_float(self.WEIGHT_DECAY, 0.0, None, 'WEIGHT_DECAY')
        yield v.validate_integer(self.EPOCHS, 0, name='EPOCHS')[:2]
        yield v.validate_integer(self.BATCH_SIZE, 1, name='BATCH_SIZE')[:2]
        for key in ('LAMBDA_MAD', 'ALPHA', 'BETA', 'FUSED_KD_WEIGHT'):
            yield v.validate_float(getattr(self, key), 0.0, None, key)
        yield v.validate_integer(self.SEED, 0, InputValidator.MAX_SEED, 'SEED')[:2]
        yield v.validate_integer(self.DATA_SEED, 0, InputValidator.MAX_SEED, 'DATA_SEED')[:2]
        yield v.validate_integer(self.EVAL_WORKERS, 1, 64, 'EVAL_WORKERS')[:2]
        yield v.validate_float(self.NOISE_SIGMA, 0.0, 1.0, 'NOISE_SIGMA')
        yield v.validate_float(self.EVENT_DROP, 0.0, 1.0, 'EVENT_DROP')
        yield v.validate_float(self.LIDAR_DENSITY, 0.0, 1.0, 'LIDAR_DENSITY')

    def loss_weights(self) -> LossWeights:
        """Configured weights with disabled terms zeroed"""
        weights = LossWeights(self.LAMBDA_MAD, self.ALPHA, self.BETA, self.FUSED_KD_WEIGHT)
        return weights.with_toggles(self.ENABLE_MAD, self.ENABLE_UMD, self.ENABLE_CMD, self.ENABLE_FUSED_KD)

    def toggles(self) -> Dict[str, bool]:
        return {'mad': self.ENABLE_MAD, 'umd': self.ENABLE_UMD, 'cmd': self.ENABLE_CMD,
                'fused_kd': self.ENABLE_FUSED_KD}

    def with_toggles(self, toggles: Dict[str, bool]) -> "ExperimentConfig":
        return self.with_overrides(ENABLE_MAD=toggles.get('mad', False), ENABLE_UMD=toggles.get('umd', False),
                                   ENABLE_CMD=toggles.get('cmd', False),
                                   ENABLE_FUSED_KD=toggles.get('fused_kd', False))

    def distillation_enabled(self) -> bool:
        return any(self.toggles().values())

    def eval_dataset_path(self) -> str:
        return self.EVAL_DATASET_PATH or self.DATASET_PATH

    def get_render_config(self) -> dict:
        """Render settings for the synthetic generator"""
        return {
            'noise_sigma': self.NOISE_SIGMA,
            'event_drop': self.EVENT_DROP,
            'lidar_density': self.LIDAR_DENSITY,
        }
