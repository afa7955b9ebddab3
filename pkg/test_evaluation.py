"""
Tests for IoU metrics and the anymodal evaluation table
"""
import csv

import numpy as np
import pytest

from error_handler import ConfigError, EmptyPredictionError, LabelRangeError, ShapeError
from evaluation import check_compatible, compute_miou, evaluate_anymodal, modality_subsets
from segmentor import init_params
from synth_data import SceneSample, generate_dataset


def _oracle_miou(pred, true, num_classes):
    ious = []
    for k in range(num_classes):
        p = {i for i, v in enumerate(pred.reshape(-1)) if v == k}
        t = {i for i, v in enumerate(true.reshape(-1)) if v == k}
        if p | t:
            ious.append(len(p & t) / len(p | t))
    return float(np.mean(ious))


def _label_only_samples(rng, count, size, num_classes):
    return [SceneSample(rng.integers(0, num_classes, size=(size, size)).astype(np.uint8), {}, i)
            for i in range(count)]


@pytest.fixture(scope="module")
def small_dataset():
    samples, manifest = generate_dataset(4, 16, 16, 4, global_seed=21)
    return samples, manifest


class TestMIoU:

    def test_hand_counted_example(self):
        iou, miou = compute_miou(np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]), 2)
        np.testing.assert_allclose(iou, [1 / 2, 2 / 3])
        assert miou == pytest.approx(7 / 12)

    def test_identical_maps(self):
        grid = np.array([[0, 1], [2, 2]])
        assert compute_miou(grid, grid, 3)[1] == 1.0

    def test_disjoint_maps(self):
        iou, miou = compute_miou(np.zeros((2, 2), dtype=int), np.ones((2, 2), dtype=int), 2)
        assert iou.tolist() == [0.0, 0.0]
        assert miou == 0.0

    def test_absent_class_is_excluded(self):
        iou, miou = compute_miou(np.array([[0, 1]]), np.array([[0, 1]]), 3)
        assert np.isnan(iou[2])
        assert miou == 1.0

    def test_matches_set_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            pred = rng.integers(0, 3, size=(4, 4))
            true = rng.integers(0, 3, size=(4, 4))
            assert compute_miou(pred, true, 3)[1] == pytest.approx(_oracle_miou(pred, true, 3), abs=1e-12)

    def test_random_predictions_near_one_seventh(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 4, size=(8, 64, 64))
        true = rng.integers(0, 4, size=(8, 64, 64))
        assert abs(compute_miou(pred, true, 4)[1] - 1 / 7) < 0.05

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_miou(np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int), 2)

    def test_class_out_of_range(self):
        with pytest.raises(LabelRangeError):
            compute_miou(np.array([[0, 5]]), np.array([[0, 1]]), 4)


class TestSubsets:

    @pytest.mark.parametrize("modalities", [['R'], ['F', 'E', 'L'], ['R', 'D', 'E', 'L']])
    def test_row_count(self, modalities):
        assert len(modality_subsets(modalities)) == 2 ** len(modalities) - 1

    def test_ordering_by_size_then_position(self):
        names = [''.join(s) for s in modality_subsets(['F', 'E', 'L'])]
        assert names == ['F', 'E', 'L', 'FE', 'FL', 'EL', 'FEL']


class TestEvaluateAnymodal:

    def test_oracle_predictor_scores_one(self):
        samples = _label_only_samples(np.random.default_rng(2), 3, 8, 4)

        def oracle(subset, batch):
            return np.stack([s.label_map for s in batch])
        table = evaluate_anymodal(None, samples, ['R', 'D', 'E', 'L'], predict_fn=oracle, num_classes=4)
        assert len(table.rows) == 15
        assert all(table.miou(n) == 1.0 for n in table.names())
        assert table.mean == 1.0

    def test_random_predictor_near_one_seventh(self):
        rng = np.random.default_rng(3)
        samples = _label_only_samples(rng, 4, 64, 4)

        def guess(subset, batch):
            return rng.integers(0, 4, size=(len(batch), 64, 64))
        table = evaluate_anymodal(None, samples, ['F', 'E', 'L'], predict_fn=guess, num_classes=4)
        assert abs(table.mean - 1 / 7) < 0.05

    def test_mean_is_average_of_rows(self, small_dataset):
        samples, _ = small_dataset
        table = evaluate_anymodal(init_params([8, 16, 24, 32], 16, 4, seed=0), samples, ['R', 'D', 'E', 'L'])
        assert table.names()[0] == 'R' and table.names()[-1] == 'RDEL'
        assert abs(table.mean - np.mean([table.miou(n) for n in table.names()])) < 1e-9
        assert table.mean_of(['R', 'D']) == pytest.approx((table.miou('R') + table.miou('D')) / 2)

    def test_thread_pool_matches_serial(self, small_dataset):
        samples, _ = small_dataset
        params = init_params([8, 16, 24, 32], 16, 4, seed=1)
        serial = evaluate_anymodal(params, samples, ['R', 'D', 'E', 'L'], workers=1)
        pooled = evaluate_anymodal(params, samples, ['R', 'D', 'E', 'L'], workers=2)
        assert serial.as_dict() == pooled.as_dict()

    def test_csv_output(self, small_dataset, tmp_path):
        samples, _ = small_dataset
        table = evaluate_anymodal(init_params([8, 16, 24, 32], 16, 4, seed=0), samples, ['R', 'E'])
        path = table.to_csv(str(tmp_path / "eval" / "anymodal_eval.csv"))
        with open(path, newline='') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['subset', 'iou_0', 'iou_1', 'iou_2', 'iou_3', 'miou']
        assert [r[0] for r in rows[1:]] == ['R', 'E', 'RE', 'Mean']
        assert float(rows[-1][-1]) == pytest.approx(100 * table.mean, abs=1e-4)

    def test_no_samples(self):
        with pytest.raises(EmptyPredictionError):
            evaluate_anymodal(None, [], ['R'], predict_fn=lambda s, b: np.zeros((0,)), num_classes=2)

    def test_needs_model_or_predictor(self, small_dataset):
        with pytest.raises(ConfigError):
            evaluate_anymodal(None, small_dataset[0], ['R'])

    def test_predictions_must_match_labels(self, small_dataset):
        samples, _ = small_dataset
        with pytest.raises(ShapeError):
            evaluate_anymodal(None, samples, ['R'], predict_fn=lambda s, b: np.zeros((len(b), 5, 5), dtype=int),
                              num_classes=4)


def test_check_compatible(small_dataset):
    _, manifest = small_dataset
    check_compatible(init_params([8, 16, 24, 32], 16, 4, seed=0), manifest)
    with pytest.raises(ShapeError):
        check_compatible(init_params([8, 16, 24, 32], 16, 3, seed=0), manifest)
