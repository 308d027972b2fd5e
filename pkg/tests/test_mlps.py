import numpy as np
import pytest

from lrfdet import mlps, nn
from lrfdet.mlps import PSBanks
from oracles import psroi_pixel_loop


def random_rois(r, n, size):
    xy = r.uniform(-8, size - 8, (n, 2))
    wh = r.uniform(4, size * 0.8, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


@pytest.mark.parametrize("k,groups,stride", [(3, 2, 4), (7, 3, 16), (2, 4, 8)])
def test_pooling_matches_pixel_loop(k, groups, stride):
    r = np.random.default_rng(k)
    h = w = 6
    maps = r.standard_normal((groups * k * k, h, w))
    rois = random_rois(r, 12, h * stride)
    pooled, _ = mlps.psroi_pool_forward(maps, rois, k, groups, stride)
    for i, roi in enumerate(rois):
        np.testing.assert_allclose(pooled[i], psroi_pixel_loop(maps, roi, k, groups, stride), atol=1e-12)


def test_bin_reads_only_its_own_map():
    k, groups = 3, 2
    maps = np.zeros((groups * k * k, 4, 4))
    # class 1, bin (2, 0)
    maps[1 * 9 + 2 * 3 + 0] = 1.0
    pooled, _ = mlps.psroi_pool_forward(maps, np.array([[0, 0, 64, 64.0]]), k, groups, 16)
    expected = np.zeros((k, k, groups))
    expected[2, 0, 1] = 1.0
    np.testing.assert_array_equal(pooled[0], expected)


def test_rejects_bad_rois():
    maps = np.zeros((9, 4, 4))
    with pytest.raises(ValueError, match="outside"):
        mlps.psroi_pool_forward(maps, np.array([[70, 70, 90, 90.0]]), 3, 1, 16)
    with pytest.raises(ValueError, match="positive area"):
        mlps.psroi_pool_forward(maps, np.array([[10, 10, 10, 20.0]]), 3, 1, 16)
    with pytest.raises(ValueError, match="expected"):
        mlps.psroi_pool_forward(maps, np.array([[0, 0, 10, 10.0]]), 3, 2, 16)


def test_pooling_gradient():
    r = np.random.default_rng(5)
    rois = random_rois(r, 5, 40)

    def fwd(maps):
        return mlps.psroi_pool_forward(maps, rois, 3, 2, 8)

    report = nn.check_gradients(fwd, mlps.psroi_pool_backward, [r.standard_normal((18, 5, 5))])
    assert report.passed, str(report)


def test_vote_sum_and_average():
    pooled = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    np.testing.assert_array_equal(mlps.vote(pooled), pooled.sum(axis=(0, 1)))
    np.testing.assert_array_equal(mlps.vote(pooled, average=True), pooled.mean(axis=(0, 1)))
    votes, scores = mlps.vote_and_score(pooled)
    np.testing.assert_allclose(scores, nn.softmax(votes))
    np.testing.assert_allclose(scores.sum(), 1.0)


@pytest.mark.parametrize("average", [False, True])
def test_roi_loss_gradient(average):
    r = np.random.default_rng(6)
    pc, pr = r.standard_normal((4, 3, 3, 3)), r.standard_normal((4, 3, 3, 4))
    labels, targets = np.array([0, 2, 1, 0]), r.standard_normal((4, 4)) * 0.3
    _, dc, dr = mlps.roi_loss(pc, pr, labels, targets, 1.0, average)
    eps = 1e-6
    for arr, grad in ((pc, dc), (pr, dr)):
        for idx in [(0, 0, 0, 0), (1, 2, 1, 2), (2, 1, 1, 1)]:
            arr[idx] += eps
            fp = mlps.roi_loss(pc, pr, labels, targets, 1.0, average)[0].total
            arr[idx] -= 2 * eps
            fm = mlps.roi_loss(pc, pr, labels, targets, 1.0, average)[0].total
            arr[idx] += eps
            assert abs((fp - fm) / (2 * eps) - grad[idx]) < 1e-7


def test_bank_shapes_and_refine():
    r = np.random.default_rng(7)
    k, classes = 7, 3
    tensors = {"ps.cls.weight": r.standard_normal((k * k * classes, 8, 1, 1)), "ps.cls.bias": np.zeros(k * k * classes),
               "ps.bbox.weight": r.standard_normal((4 * k * k, 8, 1, 1)) * 0, "ps.bbox.bias": np.zeros(4 * k * k)}
    banks = mlps.ps_banks(r.standard_normal((1, 8, 14, 14)), tensors, k)
    assert banks.cls_maps.shape == (1, 147, 14, 14) and banks.reg_maps.shape == (1, 196, 14, 14)
    assert banks.num_classes == 3
    cls, reg = mlps.mlps_roi_pool(banks, [16, 16, 160, 120])
    assert cls.shape == (7, 7, 3) and reg.shape == (7, 7, 4)
    # zero regression maps leave the RoI unchanged
    np.testing.assert_allclose(mlps.refine_roi([16, 16, 160, 120], reg), [16, 16, 160, 120])


def test_bank_width_checks():
    tensors = {"ps.cls.weight": np.zeros((10, 8, 1, 1)), "ps.cls.bias": np.zeros(10),
               "ps.bbox.weight": np.zeros((36, 8, 1, 1)), "ps.bbox.bias": np.zeros(36)}
    with pytest.raises(ValueError, match="inconsistent"):
        mlps.ps_banks(np.zeros((1, 8, 4, 4)), tensors, 3)
