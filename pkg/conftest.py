"""
Shared fixtures: a desk-sized experiment that trains in seconds
"""
import pytest

from config import ExperimentConfig
from synth_data import generate_dataset

collect_ignore = ["examples"]

TINY = {
    'IMAGE_SIZE': 16,
    'NUM_CLASSES': 4,
    'CHANNELS': [4, 4, 8, 8],
    'DECODER_CHANNELS': 4,
    'NUM_SAMPLES': 8,
    'HOLDOUT_FRACTION': 0.25,
    'EPOCHS': 2,
    'BATCH_SIZE': 3,
    'LEARNING_RATE': 5e-3,
    'SEED': 7,
    'EVAL_WORKERS': 1,
}


@pytest.fixture(scope="session")
def tiny_samples():
    samples, _ = generate_dataset(TINY['NUM_SAMPLES'], 16, 16, 4, global_seed=1234)
    return samples


@pytest.fixture
def tiny_config(tmp_path):
    values = dict(TINY, OUTPUT_DIR=str(tmp_path / "runs"), DATASET_PATH=str(tmp_path / "data" / "train.anyseg"))
    return ExperimentConfig(values, use_env=False)
