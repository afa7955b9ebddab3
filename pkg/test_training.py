"""
Tests for the teacher/student training protocol
"""
import numpy as np
import pytest

from autodiff import Tensor
from checkpoint_manager import file_checksum, params_checksum, read_checkpoint, write_checkpoint
from distill_losses import ModalityMask
from error_handler import ConfigError, NonFiniteLossError, ShapeError
from metrics_log import read_metrics
from segmentor import init_params
from synth_data import SceneSample, generate_dataset, write_dataset
from training_manager import (AdamW, PolySchedule, TrainingManager, group_by_mask, train_dropout_baseline,
                              train_student, train_teacher)


@pytest.fixture
def teacher(tiny_config, tiny_samples):
    return train_teacher(tiny_config, tiny_samples)


def _file_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


# =============================================================================
# Schedule and optimizer
# =============================================================================

class TestPolySchedule:

    def test_warmup_then_decay(self):
        schedule = PolySchedule(1.0, 100, power=0.9, warmup_fraction=0.05, warmup_ratio=0.1)
        assert schedule.warmup_steps == 5
        assert [schedule.lr_at(s) for s in range(5)] == [0.1] * 5
        assert schedule.lr_at(5) == 1.0
        assert schedule.lr_at(55) == pytest.approx((1 - 50 / 95) ** 0.9)
        assert schedule.lr_at(100) == 0.0

    def test_monotone_after_warmup(self):
        schedule = PolySchedule(6e-5, 40)
        rates = [schedule.lr_at(s) for s in range(schedule.warmup_steps, 40)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_no_steps(self):
        schedule = PolySchedule(1.0, 0)
        assert schedule.warmup_steps == 0
        assert schedule.lr_at(0) == 1.0


class TestAdamW:

    def test_first_step_moves_by_learning_rate(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([2.0, -0.5])
        AdamW([p]).step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.0])
        AdamW([p], weight_decay=0.5).step(0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_tensors_without_grad_are_skipped(self):
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        AdamW([p]).step(0.1)
        assert p.data[0] == 1.0


def test_group_by_mask_keeps_first_appearance_order():
    rd, r = ModalityMask(('R', 'D')), ModalityMask(('R',))
    groups = group_by_mask([rd, r, rd, r, rd])
    assert list(groups) == [rd, r]
    assert groups[rd] == [0, 2, 4]


# =============================================================================
# Teacher
# =============================================================================

class TestTeacher:

    def test_zero_epochs_keeps_initial_params(self, tiny_config, tiny_samples):
        config = tiny_config.with_overrides(EPOCHS=0)
        result = train_teacher(config, tiny_samples)
        initial = init_params(config.CHANNELS, config.DECODER_CHANNELS, config.NUM_CLASSES, [config.SEED, 0])
        assert params_checksum(result.params) == params_checksum(initial)
        assert result.epochs == []
        assert read_metrics(result.metrics_path) == []

    def test_checkpoint_is_frozen(self, teacher):
        params, meta = read_checkpoint(teacher.checkpoint_path)
        assert meta['frozen'] is True and meta['role'] == 'teacher'
        assert params_checksum(params) == params_checksum(teacher.params)

    def test_metrics_records(self, teacher, tiny_config):
        steps = read_metrics(teacher.metrics_path, kind='step')
        epochs = read_metrics(teacher.metrics_path, kind='epoch')
        assert len(steps) == 2 * tiny_config.EPOCHS
        assert [r['step'] for r in steps] == list(range(len(steps)))
        assert len(epochs) == tiny_config.EPOCHS
        assert all(0.0 <= r['holdout_miou'] <= 1.0 for r in epochs)
        assert all(r['total'] == r['sup'] for r in steps)

    def test_identical_seeds_give_identical_logs(self, tiny_config, tiny_samples, tmp_path):
        first = train_teacher(tiny_config, tiny_samples)
        second = train_teacher(tiny_config.with_overrides(OUTPUT_DIR=str(tmp_path / "again")), tiny_samples)
        assert _file_bytes(first.metrics_path) == _file_bytes(second.metrics_path)
        assert params_checksum(first.params) == params_checksum(second.params)

    def test_different_seed_changes_training(self, tiny_config, tiny_samples, tmp_path):
        first = train_teacher(tiny_config, tiny_samples)
        other = train_teacher(tiny_config.with_overrides(SEED=8, OUTPUT_DIR=str(tmp_path / "other")), tiny_samples)
        assert params_checksum(first.params) != params_checksum(other.params)

    def test_non_finite_input_stops_training(self, tiny_config, tiny_samples):
        poisoned = list(tiny_samples)
        first = poisoned[0]
        images = dict(first.modality_images)
        images['R'] = np.full_like(images['R'], np.nan)
        poisoned[0] = SceneSample(first.label_map, images, first.seed)
        with pytest.raises(NonFiniteLossError) as info:
            train_teacher(tiny_config, poisoned)
        assert 'step' in info.value.context


class TestDatasetLoading:

    def test_reads_dataset_file(self, tiny_config):
        samples, manifest = generate_dataset(8, 16, 16, 4, global_seed=5)
        write_dataset(samples, manifest, tiny_config.DATASET_PATH)
        manager = TrainingManager(tiny_config)
        train, holdout = manager.split()
        assert (len(train), len(holdout)) == (6, 2)

    def test_class_count_mismatch(self, tiny_config):
        samples, manifest = generate_dataset(8, 16, 16, 3, global_seed=5)
        write_dataset(samples, manifest, tiny_config.DATASET_PATH)
        with pytest.raises(ConfigError):
            TrainingManager(tiny_config).load_samples()

    def test_missing_modality(self, tiny_config):
        samples, manifest = generate_dataset(8, 16, 16, 4, modalities=('R', 'D'), global_seed=5)
        write_dataset(samples, manifest, tiny_config.DATASET_PATH)
        with pytest.raises(ConfigError):
            TrainingManager(tiny_config).load_samples()


# =============================================================================
# Student
# =============================================================================

class TestStudent:

    def test_loss_identity_on_every_step(self, tiny_config, tiny_samples, teacher):
        result = train_student(tiny_config, teacher.checkpoint_path, tiny_samples)
        weights = tiny_config.loss_weights()
        for record in read_metrics(result.metrics_path, kind='step'):
            expected = (record['sup'] + weights.lambda_mad * record['mad'] + weights.alpha * record['umd']
                        + weights.beta * record['cmd'] + weights.fused_kd * record['fused'])
            assert abs(record['total'] - expected) <= 1e-6 * max(1.0, abs(expected))
            for key in ('mad', 'umd', 'cmd'):
                assert record[key] >= -1e-9

    def test_teacher_is_unchanged(self, tiny_config, tiny_samples, teacher):
        before = file_checksum(teacher.checkpoint_path)
        result = train_student(tiny_config, teacher.checkpoint_path, tiny_samples)
        assert file_checksum(teacher.checkpoint_path) == before
        _, meta = read_checkpoint(result.checkpoint_path)
        assert meta['teacher_checksum'] == before
        assert meta['role'] == 'student' and meta['frozen'] is False

    def test_fused_kd_term_is_reported(self, tiny_config, tiny_samples, teacher):
        config = tiny_config.with_overrides(ENABLE_FUSED_KD=True, FUSED_KD_WEIGHT=1.0)
        result = train_student(config, teacher.checkpoint_path, tiny_samples, name='fused')
        steps = read_metrics(result.metrics_path, kind='step')
        assert all(r['fused'] >= -1e-9 for r in steps)
        assert any(r['fused'] > 0 for r in steps)

    def test_unfrozen_teacher_is_rejected(self, tiny_config, tiny_samples, tmp_path):
        params = init_params(tiny_config.CHANNELS, tiny_config.DECODER_CHANNELS, 4, seed=0)
        path = write_checkpoint(params, str(tmp_path / "loose.ckpt"))
        with pytest.raises(ConfigError):
            train_student(tiny_config, path, tiny_samples)

    def test_teacher_shape_mismatch(self, tiny_config, tiny_samples, tmp_path):
        params = init_params([4, 4, 4, 4], tiny_config.DECODER_CHANNELS, 4, seed=0)
        params.freeze()
        path = write_checkpoint(params, str(tmp_path / "other.ckpt"))
        with pytest.raises(ShapeError):
            train_student(tiny_config, path, tiny_samples)

    def test_toggles_off_matches_dropout_baseline(self, tiny_config, tiny_samples):
        config = tiny_config.with_toggles({})
        student = train_student(config, 'no/such/teacher.ckpt', tiny_samples, name='student')
        baseline = train_dropout_baseline(config, tiny_samples, name='baseline')
        assert read_metrics(student.metrics_path) == read_metrics(baseline.metrics_path)
        assert params_checksum(student.params) == params_checksum(baseline.params)

    def test_summary(self, tiny_config, tiny_samples, teacher):
        summary = train_student(tiny_config, teacher.checkpoint_path, tiny_samples).summary()
        assert summary['epochs'] == tiny_config.EPOCHS
        assert summary['checkpoint'].endswith('student.ckpt')
        assert 0.0 <= summary['holdout_miou'] <= 1.0
