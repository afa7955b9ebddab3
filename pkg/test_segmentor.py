"""
Tests for the weight-shared segmentor and PML fusion
"""
from collections import OrderedDict

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor, grad_check
from error_handler import ShapeError
from segmentor import (SegmentorParams, decode, downsample_labels, encode, encode_modalities, init_params,
                       pml_fuse, predict_labels, predict_probs, segment)

CHANNELS = [8, 16, 24, 32]


@pytest.fixture
def params():
    return init_params(CHANNELS, 16, 4, seed=0)


@pytest.fixture
def params64():
    return init_params([2, 3, 3, 4], 3, 3, seed=1, dtype=np.float64)


def _zero_biases(params: SegmentorParams) -> SegmentorParams:
    for name in params.names():
        if name.endswith('.bias'):
            params[name].data[...] = 0.0
    return params


def _random_features(rng, batch=2, h=16, channels=CHANNELS):
    return [Tensor(rng.standard_normal((batch, h >> i, h >> i, c)), dtype=np.float64)
            for i, c in enumerate(channels, start=1)]


class TestEncode:

    def test_stage_shapes(self, params):
        image = np.random.default_rng(0).random((16, 16, 3))
        shapes = [f.shape for f in encode(image, params)]
        assert shapes == [(8, 8, 8), (4, 4, 16), (2, 2, 24), (1, 1, 32)]

    def test_batched_stage_shapes(self, params):
        image = np.random.default_rng(0).random((3, 32, 16, 3))
        assert encode(image, params)[-1].shape == (3, 2, 1, 32)

    def test_rejects_non_divisible_extent(self, params):
        with pytest.raises(ShapeError):
            encode(np.zeros((12, 16, 3)), params)

    def test_rejects_wrong_channel_count(self, params):
        with pytest.raises(ShapeError):
            encode(np.zeros((16, 16, 4)), params)

    def test_zero_input_zero_bias_gives_zero_features(self, params):
        features = encode(np.zeros((16, 16, 3)), _zero_biases(params))
        assert all(np.all(f.data == 0.0) for f in features)

    def test_weight_sharing(self, params):
        rng = np.random.default_rng(2)
        images = {'R': rng.random((16, 16, 3)), 'D': rng.random((16, 16, 3))}
        features = encode_modalities(images, params)
        for a, b in zip(features['R'], features['D']):
            assert a.shape == b.shape
            assert not np.array_equal(a.data, b.data)

        before = features['D'][0].data.copy()
        params['stage1.weight'].data *= 2.0
        after = encode_modalities(images, params)
        assert not np.array_equal(after['D'][0].data, before)


class TestFusion:

    def test_opposite_features_fuse_to_zero(self):
        rng = np.random.default_rng(3)
        stages = _random_features(rng)
        negated = [Tensor(-f.data) for f in stages]
        fused = pml_fuse({'R': stages, 'D': negated})
        assert all(np.all(f.data == 0.0) for f in fused)

    def test_single_modality_is_identity(self):
        stages = _random_features(np.random.default_rng(4))
        fused = pml_fuse({'R': stages})
        assert all(f is s for f, s in zip(fused, stages))

    def test_matches_brute_force_mean(self):
        rng = np.random.default_rng(5)
        features = {m: _random_features(rng) for m in 'RDEL'}
        fused = pml_fuse(features)
        for i, f in enumerate(fused):
            expected = sum(features[m][i].data for m in 'RDEL') / 4
            np.testing.assert_allclose(f.data, expected, atol=1e-6)

    def test_bit_invariant_under_reordering(self):
        rng = np.random.default_rng(6)
        features = OrderedDict((m, _random_features(rng)) for m in 'RDEL')
        reordered = OrderedDict((m, features[m]) for m in 'LEDR')
        for a, b in zip(pml_fuse(features), pml_fuse(reordered)):
            assert a.data.tobytes() == b.data.tobytes()

    def test_empty_set_is_rejected(self):
        with pytest.raises(ShapeError):
            pml_fuse({})

    def test_inconsistent_shapes_are_rejected(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ShapeError):
            pml_fuse({'R': _random_features(rng, batch=2), 'D': _random_features(rng, batch=3)})


class TestDecode:

    def test_zero_features_give_uniform_probabilities(self, params):
        features = [Tensor(np.zeros((16 >> i, 16 >> i, c)), dtype=np.float32)
                    for i, c in enumerate(CHANNELS, start=1)]
        logits = decode(features, _zero_biases(params))
        assert logits.shape == (8, 8, 4)
        assert np.all(logits.data == 0.0)
        np.testing.assert_allclose(predict_probs(logits).data, 0.25, atol=1e-7)

    def test_single_class_always_predicts_zero(self):
        params = init_params(CHANNELS, 16, 1, seed=3)
        out = segment({'R': np.random.default_rng(0).random((2, 16, 16, 3))}, params, ['R'])
        assert np.all(predict_labels(out.logits) == 0)

    def test_rejects_wrong_stage_count(self, params):
        features = _random_features(np.random.default_rng(8))[:3]
        with pytest.raises(ShapeError):
            decode(features, params)

    def test_decoder_weight_gradient(self, params64):
        rng = np.random.default_rng(9)
        features = _random_features(rng, batch=1, channels=params64.channels)
        readout = Tensor(rng.standard_normal((1, 8, 8, 3)), dtype=np.float64)

        def function(weight):
            tensors = OrderedDict(params64.tensors)
            tensors['decoder2.weight'] = weight
            swapped = SegmentorParams(tensors, params64.channels, params64.decoder_channels,
                                      params64.num_classes, params64.merge_factor)
            return ad.sum_over(ad.mul(decode(features, swapped), readout))

        assert grad_check(function, params64['decoder2.weight'].data) < 1e-4

    def test_end_to_end_gradient_on_16x16(self, params64):
        rng = np.random.default_rng(10)
        depth = rng.random((16, 16, 3))
        readout = Tensor(rng.standard_normal((8, 8, 3)), dtype=np.float64)

        def function(image):
            fused = pml_fuse(encode_modalities({'R': image, 'D': depth}, params64))
            return ad.sum_over(ad.mul(decode(fused, params64), readout))

        assert grad_check(function, rng.random((16, 16, 3))) < 1e-4


class TestPredict:

    def test_uniform_logits(self):
        probs = predict_probs(Tensor(np.zeros((1, 3)), dtype=np.float64))
        np.testing.assert_allclose(probs.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_saturation(self):
        probs = predict_probs(Tensor(np.array([[100.0, 0.0, 0.0]]), dtype=np.float64))
        assert probs.data[0, 0] >= 1 - 1e-6

    def test_matches_exp_normalize(self):
        logits = np.random.default_rng(11).standard_normal((4, 4, 5))
        probs = predict_probs(Tensor(logits, dtype=np.float64)).data
        expected = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs, expected, atol=1e-6)

    def test_argmax_ties_go_to_lowest_class(self):
        assert predict_labels(np.array([[0.5, 0.5, 0.1]])).tolist() == [0]


def test_label_downsampling_majority_vote():
    labels = np.array([[0, 1, 2, 2],
                       [1, 1, 2, 3],
                       [0, 0, 3, 3],
                       [1, 1, 3, 2]])
    # top-right block 2,2,2,3 -> 2; bottom-left tie 0/1 -> 0
    assert downsample_labels(labels, 4).tolist() == [[1, 2], [0, 3]]


def test_params_copy_is_independent(params):
    clone = params.copy()
    clone['classifier.bias'].data += 1.0
    assert not np.array_equal(clone['classifier.bias'].data, params['classifier.bias'].data)
    assert clone.shape_config() == params.shape_config()
