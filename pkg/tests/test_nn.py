import numpy as np
import pytest

from lrfdet import nn
from oracles import conv2d_loops, depthwise_loops, maxpool_loops


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 0, 2)])
def test_conv2d_matches_loops(stride, pad, k):
    r = rng(stride * 10 + pad)
    x = r.standard_normal((2, 3, 7, 6))
    w = r.standard_normal((4, 3, k, k))
    b = r.standard_normal(4)
    y = nn.conv2d(x, nn.ConvKernel(w, b, stride, pad))
    np.testing.assert_allclose(y, conv2d_loops(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv2d_table_row_arithmetic():
    # a single 1x1 convolution on a 1x1 map is a matrix-vector product
    r = rng(1)
    x = r.standard_normal((1, 512, 1, 1))
    w = r.standard_normal((1000, 512, 1, 1))
    y = nn.conv2d(x, nn.ConvKernel(w))
    np.testing.assert_allclose(y[0, :, 0, 0], w[:, :, 0, 0] @ x[0, :, 0, 0], atol=1e-10)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_depthwise_matches_loops(stride, pad):
    r = rng(3)
    x = r.standard_normal((2, 5, 6, 7))
    w = r.standard_normal((5, 3, 3))
    y = nn.depthwise_conv2d(x, nn.DepthwiseKernel(w, stride, pad))
    np.testing.assert_allclose(y, depthwise_loops(x, w, stride, pad), rtol=0, atol=1e-12)


def test_depthwise_channels_are_independent():
    x = np.zeros((1, 3, 5, 5))
    x[0, 1] = 1.0
    w = np.ones((3, 3, 3))
    y = nn.depthwise_conv2d(x, nn.DepthwiseKernel(w, 1, 1))
    assert not y[0, 0].any() and not y[0, 2].any()
    assert y[0, 1, 2, 2] == 9.0


@pytest.mark.parametrize("shape", [(1, 2, 7, 7), (2, 1, 8, 5), (1, 1, 112, 112)])
@pytest.mark.parametrize("ceil_mode", [True, False])
def test_maxpool_matches_loops(shape, ceil_mode):
    x = rng(4).standard_normal(shape)
    np.testing.assert_array_equal(nn.maxpool2d(x, 3, 2, ceil_mode), maxpool_loops(x, 3, 2, ceil_mode))


def test_maxpool_ceil_sizes():
    assert nn.pool_output_size(112, 3, 2, True) == 56
    assert nn.pool_output_size(112, 3, 2, False) == 55
    assert nn.pool_output_size(28, 2, 2, False) == 14


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError, match="4-D"):
        nn.conv2d(np.zeros((3, 4, 4)), nn.ConvKernel(np.zeros((2, 3, 1, 1))))
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((1, 4, 4, 4)), nn.ConvKernel(np.zeros((2, 3, 1, 1))))
    with pytest.raises(ValueError):
        nn.ConvKernel(np.zeros((2, 3, 1)))


def test_conv_weights_untouched():
    r = rng(5)
    w = r.standard_normal((2, 3, 3, 3))
    before = w.copy()
    nn.conv2d(r.standard_normal((1, 3, 5, 5)), nn.ConvKernel(w, None, 1, 1))
    np.testing.assert_array_equal(w, before)


# --------------------------------------------------------------------------
# gradients


def _check(forward, backward, inputs, **kw):
    report = nn.check_gradients(forward, backward, inputs, **kw)
    assert report.passed, str(report)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
def test_conv_gradients(stride, pad, k):
    r = rng(6)
    x, w, b = r.standard_normal((2, 3, 5, 5)), r.standard_normal((4, 3, k, k)), r.standard_normal(4)
    _check(lambda x, w, b: nn.conv2d_forward(x, nn.ConvKernel(w, b, stride, pad)),
           nn.conv2d_backward, [x, w, b])


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_gradients(stride):
    r = rng(7)
    _check(lambda x, w: nn.depthwise_conv2d_forward(x, nn.DepthwiseKernel(w, stride, 1)),
           nn.depthwise_conv2d_backward, [r.standard_normal((2, 3, 6, 5)), r.standard_normal((3, 3, 3))])


@pytest.mark.parametrize("ceil_mode", [True, False])
def test_maxpool_gradients(ceil_mode):
    # distinct values keep the argmax away from ties
    x = rng(8).permutation(2 * 7 * 6).reshape(1, 2, 7, 6) * 0.1
    _check(lambda x: nn.maxpool2d_forward(x, 3, 2, ceil_mode), nn.maxpool2d_backward, [x])


def test_batchnorm_train_gradients():
    r = rng(9)
    x = r.standard_normal((2, 3, 4, 4))
    gamma, beta = r.standard_normal(3), r.standard_normal(3)

    def fwd(x, g, b):
        p = nn.BatchNormParams(g, b, np.zeros(3), np.ones(3))
        y, cache, _ = nn.batchnorm_forward(x, p, "train")
        return y, cache

    _check(fwd, nn.batchnorm_backward, [x, gamma, beta])


def test_batchnorm_infer_gradients():
    r = rng(10)
    rm, rv = r.standard_normal(3), r.uniform(0.5, 2, 3)

    def fwd(x, g, b):
        y, cache, _ = nn.batchnorm_forward(x, nn.BatchNormParams(g, b, rm, rv), "infer")
        return y, cache

    _check(fwd, nn.batchnorm_backward, [r.standard_normal((1, 3, 3, 3)), r.standard_normal(3), r.standard_normal(3)])


def test_batchnorm_running_stats_returned_not_mutated():
    x = rng(11).standard_normal((2, 3, 4, 4)) * 2 + 1
    p = nn.BatchNormParams.identity(3)
    _, _, new = nn.batchnorm_forward(x, p, "train")
    np.testing.assert_array_equal(p.running_mean, 0)
    m = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(new.running_mean, 0.1 * m, atol=1e-12)
    n = x.size // 3
    np.testing.assert_allclose(new.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), atol=1e-12)


def test_relu_and_avgpool_gradients():
    r = rng(12)
    x = r.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    _check(nn.relu_forward, nn.relu_backward, [x])
    _check(nn.global_avgpool_forward, nn.global_avgpool_backward, [x])


def test_softmax_properties():
    z = rng(13).standard_normal((5, 4)) * 50
    p = nn.softmax(z, axis=1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    np.testing.assert_allclose(nn.softmax(z + 1000.0, axis=1), p, atol=1e-12)
    np.testing.assert_allclose(np.exp(nn.log_softmax(z, axis=1)), p, atol=1e-12)

    def fwd(z):
        y = nn.softmax(z, axis=1)
        return y, y

    _check(fwd, lambda dy, y: nn.softmax_backward(dy, y, axis=1), [rng(14).standard_normal((3, 4))])


def test_smooth_l1_values_and_gradient():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    np.testing.assert_allclose(nn.smooth_l1(x), [1.5, 0.125, 0.0, 0.125, 1.5])
    np.testing.assert_allclose(nn.smooth_l1_backward(x), [-1, -0.5, 0, 0.5, 1])


def test_gradcheck_detects_wrong_gradient():
    x = rng(15).standard_normal((2, 3))
    report = nn.check_gradients(lambda x: (x ** 2, x), lambda dy, x: dy * x, [x])
    assert not report.passed
    assert "FAILED" in str(report)
