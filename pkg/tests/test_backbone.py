from dataclasses import replace

import numpy as np
import pytest

from lrfdet.backbone import (BackboneConfig, build_rfdnet, check_input, dump_average_feature_map,
                             forward_classifier, forward_features, rfdnet_layers, tap_stride)
from lrfdet.layers import LayerSpec, check_chain

# filter shapes of the published layer table, written out row by row
TABLE_ROWS = [
    3 * 3 * 3 * 64,
    *[1 * 1 * 64 * 64, 3 * 3 * 64, 1 * 1 * 64 * 64] * 2,
    1 * 1 * 64 * 128, 3 * 3 * 128, 1 * 1 * 128 * 128,
    1 * 1 * 128 * 128, 3 * 3 * 128, 1 * 1 * 128 * 128,
    1 * 1 * 128 * 256, 3 * 3 * 256, 1 * 1 * 256 * 256,
    1 * 1 * 256 * 256, 3 * 3 * 256, 1 * 1 * 256 * 256,
    1 * 1 * 256 * 512, 3 * 3 * 512, 1 * 1 * 512 * 512,
    1 * 1 * 512 * 512, 3 * 3 * 512, 1 * 1 * 512 * 512,
    1 * 1 * 512 * 1000,
]


@pytest.fixture(scope="module")
def full():
    return build_rfdnet(BackboneConfig(), seed=0)


def test_weight_count_matches_table(full):
    weights = sum(v.size for k, v in full.tensors.items() if k.endswith(".weight"))
    assert weights == sum(TABLE_ROWS) == 1_751_616


def test_total_parameters(full):
    # 4 normalization vectors per normalized layer plus the classifier bias
    bn_channels = 64 + sum(3 * w for w in (64, 64, 128, 128, 256, 256, 512, 512))
    assert full.count() == 1_751_616 + 4 * bn_channels + 1000


def test_taps_at_224(full):
    x = np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32)
    taps = forward_features(full, x)
    assert {k: v.shape[1:] for k, v in taps.items()} == {
        "dsf4": (128, 28, 28), "dsf7": (256, 14, 14), "dsf9": (512, 14, 14)}


def test_tap_strides():
    assert [tap_stride(t) for t in ("dsf2", "dsf4", "dsf6", "dsf7", "dsf9")] == [4, 8, 16, 16, 16]


def test_classifier_output_is_a_distribution(full):
    x = np.random.default_rng(1).standard_normal((2, 3, 64, 64)).astype(np.float32)
    p = forward_classifier(full, x)
    assert p.shape == (2, 1000)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    # tiny random weights: nearly uniform
    entropy = -(p * np.log(p)).sum(axis=1)
    assert np.all(entropy > np.log(1000) - 0.01)


def test_classifier_needs_classifier_params():
    params = build_rfdnet(BackboneConfig.desk())
    with pytest.raises(ValueError, match="classifier"):
        forward_classifier(params, np.zeros((1, 3, 32, 32), np.float32))


def test_check_input_suggests_letterbox():
    with pytest.raises(ValueError, match="240x256"):
        check_input(np.zeros((1, 3, 230, 250)), BackboneConfig())
    with pytest.raises(ValueError):
        check_input(np.zeros((3, 224, 224)), BackboneConfig())


def test_inconsistent_chain_rejected():
    specs = rfdnet_layers(BackboneConfig.desk())
    bad = specs[:3] + [replace(specs[3], in_channels=specs[3].in_channels + 1)] + specs[4:]
    with pytest.raises(ValueError, match="inconsistent channel chain"):
        check_chain(bad, 3)
    with pytest.raises(ValueError, match="DSF widths"):
        rfdnet_layers(BackboneConfig(dsf_widths=(8,) * 7))


def test_desk_widths():
    cfg = BackboneConfig.desk(8)
    assert cfg.stem_width == 8 and cfg.dsf_widths == (8, 8, 16, 16, 32, 32, 64, 64)
    assert cfg.detection_mode


@pytest.mark.parametrize("tap,shape", [("MP1", (56, 56)), ("MP3", (28, 28)), ("MP5", (14, 14)), ("DSF9", (14, 14))])
def test_feature_dump(tap, shape):
    params = build_rfdnet(BackboneConfig.desk(), seed=2)
    x = np.random.default_rng(2).random((1, 3, 224, 224)).astype(np.float32)
    m, img = dump_average_feature_map(params, x, tap)
    assert m.shape == shape and img.shape == shape and img.dtype == np.uint8
    if m.max() > m.min():
        assert img.min() == 0 and img.max() == 255


def test_feature_dump_unknown_tap():
    params = build_rfdnet(BackboneConfig.desk())
    with pytest.raises(ValueError, match="unknown tap"):
        dump_average_feature_map(params, np.zeros((1, 3, 32, 32), np.float32), "MP7")
