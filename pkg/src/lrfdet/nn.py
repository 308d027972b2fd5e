"""Differentiable numpy primitives.

Every operation comes as a ``*_forward`` function returning ``(out, cache)``
and a matching ``*_backward`` taking the upstream gradient and the cache.
The plain names (``conv2d``, ``relu``, ...) are forward-only conveniences.

Feature maps are ``(N, C, H, W)`` arrays. Nothing here mutates its inputs;
``batchnorm_forward`` in train mode hands back fresh running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ConvKernel", "DepthwiseKernel", "BatchNormParams",
    "conv2d", "conv2d_forward", "conv2d_backward",
    "depthwise_conv2d", "depthwise_conv2d_forward", "depthwise_conv2d_backward",
    "maxpool2d", "maxpool2d_forward", "maxpool2d_backward", "pool_output_size",
    "global_avgpool", "global_avgpool_forward", "global_avgpool_backward",
    "batchnorm", "batchnorm_forward", "batchnorm_backward",
    "relu", "relu_forward", "relu_backward",
    "softmax", "softmax_backward", "log_softmax",
    "smooth_l1", "smooth_l1_backward",
    "conv_output_size", "GradCheckReport", "check_gradients",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvKernel:
    """Dense ``(Q, P, K, K)`` convolution kernel with optional bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be (Q, P, K, K), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias length {self.bias.shape} != out_channels {self.weight.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.shape[2]


@dataclass
class DepthwiseKernel:
    """One ``K x K`` filter per channel, weight shape ``(P, K, K)``."""

    weight: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 3 or self.weight.shape[1] != self.weight.shape[2]:
            raise ValueError(f"depthwise weight must be (P, K, K), got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ValueError(f"batchnorm {name} shape {getattr(self, name).shape} != {c}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")


def _check_nchw(x: np.ndarray, what: str = "input"):
    if x.ndim != 4:
        raise ValueError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


# --------------------------------------------------------------------------
# standard convolution


def conv2d_forward(x: np.ndarray, kernel: ConvKernel):
    _check_nchw(x)
    n, p, h, w = x.shape
    k, s, pad = kernel.size, kernel.stride, kernel.padding
    if p != kernel.in_channels:
        raise ValueError(f"channel mismatch: input has {p} channels, kernel expects P={kernel.in_channels}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"spatial size {h}x{w} (padding {pad}) smaller than kernel {k}")
    ho, wo = conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad)
    q = kernel.out_channels
    if k == 1 and s == 1 and pad == 0:
        y = np.matmul(kernel.weight.reshape(q, p), x.reshape(n, p, h * w)).reshape(n, q, h, w)
        cols = None
    else:
        xp = _pad(x, pad)
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        y = np.tensordot(cols, kernel.weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if kernel.bias is not None:
        y = y + kernel.bias[None, :, None, None]
    y = np.ascontiguousarray(y)
    return y, (x, cols, kernel)


def conv2d_backward(dy: np.ndarray, cache):
    """Returns ``(dx, dweight, dbias)``; ``dbias`` is None for bias-free kernels."""
    x, cols, kernel = cache
    n, p, h, w = x.shape
    q, _, k, _ = kernel.weight.shape
    s, pad = kernel.stride, kernel.padding
    db = dy.sum(axis=(0, 2, 3)) if kernel.bias is not None else None
    if cols is None:
        dyf = dy.reshape(n, q, h * w)
        wf = kernel.weight.reshape(q, p)
        dw = np.einsum("nqm,npm->qp", dyf, x.reshape(n, p, h * w)).reshape(kernel.weight.shape)
        dx = np.matmul(wf.T, dyf).reshape(x.shape)
        return dx, dw, db
    ho, wo = dy.shape[2:]
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros((n, p, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(kernel.weight[:, :, i, j], dy, axes=([0], [1]))
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(1, 0, 2, 3)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    return conv2d_forward(x, kernel)[0]


# --------------------------------------------------------------------------
# depthwise convolution


def depthwise_conv2d_forward(x: np.ndarray, kernel: DepthwiseKernel):
    _check_nchw(x)
    n, c, h, w = x.shape
    k, s, pad = kernel.size, kernel.stride, kernel.padding
    if c != kernel.channels:
        raise ValueError(f"channel mismatch: input has {c} channels, depthwise kernel has P={kernel.channels}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"spatial size {h}x{w} (padding {pad}) smaller than kernel {k}")
    ho, wo = conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad)
    xp = _pad(x, pad)
    y = np.zeros((n, c, ho, wo), dtype=np.result_type(x, kernel.weight))
    for i in range(k):
        for j in range(k):
            y += kernel.weight[None, :, i, j, None, None] * \
                xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return y, (xp, x.shape, kernel)


def depthwise_conv2d_backward(dy: np.ndarray, cache):
    """Returns ``(dx, dweight)``."""
    xp, shape, kernel = cache
    _, _, h, w = shape
    k, s, pad = kernel.size, kernel.stride, kernel.padding
    ho, wo = dy.shape[2:]
    dxp = np.zeros(xp.shape, dtype=dy.dtype)
    dw = np.zeros(kernel.weight.shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None),
                  slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
            dw[:, i, j] = np.einsum("nchw,nchw->c", dy, xp[sl])
            dxp[sl] += kernel.weight[None, :, i, j, None, None] * dy
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dw


def depthwise_conv2d(x: np.ndarray, kernel: DepthwiseKernel) -> np.ndarray:
    return depthwise_conv2d_forward(x, kernel)[0]


# --------------------------------------------------------------------------
# pooling


def pool_output_size(size: int, window: int, stride: int, ceil_mode: bool) -> int:
    span = size - window
    if span < 0:
        raise ValueError(f"pooling window {window} larger than input size {size}")
    out = (-(-span // stride) if ceil_mode else span // stride) + 1
    # the last window must start inside the input
    if ceil_mode and (out - 1) * stride >= size:
        out -= 1
    return out


def maxpool2d_forward(x: np.ndarray, window: int, stride: int, ceil_mode: bool = False):
    _check_nchw(x)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    n, c, h, w = x.shape
    ho = pool_output_size(h, window, stride, ceil_mode)
    wo = pool_output_size(w, window, stride, ceil_mode)
    need_h, need_w = (ho - 1) * stride + window, (wo - 1) * stride + window
    xp = x
    if need_h > h or need_w > w:
        xp = np.pad(x, ((0, 0), (0, 0), (0, max(0, need_h - h)), (0, max(0, need_w - w))),
                    constant_values=-np.inf)
    views = [xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
             for i in range(window) for j in range(window)]
    stacked = np.stack(views)
    arg = stacked.argmax(axis=0)
    y = np.take_along_axis(stacked, arg[None], axis=0)[0]
    return y, (x.shape, xp.shape, arg, window, stride)


def maxpool2d_backward(dy: np.ndarray, cache):
    shape, padded_shape, arg, window, stride = cache
    ho, wo = dy.shape[2:]
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    idx = 0
    for i in range(window):
        for j in range(window):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                np.where(arg == idx, dy, 0)
            idx += 1
    return np.ascontiguousarray(dxp[:, :, :shape[2], :shape[3]])


def maxpool2d(x: np.ndarray, window: int, stride: int, ceil_mode: bool = False) -> np.ndarray:
    return maxpool2d_forward(x, window, stride, ceil_mode)[0]


def global_avgpool_forward(x: np.ndarray):
    _check_nchw(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError("spatial dims must be >= 1")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avgpool_backward(dy: np.ndarray, shape):
    h, w = shape[2:]
    return np.broadcast_to(dy / (h * w), shape).copy()


def global_avgpool(x: np.ndarray) -> np.ndarray:
    return global_avgpool_forward(x)[0]


# --------------------------------------------------------------------------
# normalization and activations


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, mode: str = "infer"):
    """Per-channel batch normalization over (N, H, W).

    Returns ``(y, cache, stats)`` where ``stats`` is a new BatchNormParams
    (updated running statistics in train mode, ``params`` itself otherwise).
    """
    _check_nchw(x)
    c = x.shape[1]
    if params.gamma.shape != (c,):
        raise ValueError(f"channel mismatch: input has {c} channels, batchnorm has {params.gamma.shape[0]}")
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count == 0:
            raise ValueError("zero-size batch in train mode")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        m = params.momentum
        stats = replace(params,
                        running_mean=(m * params.running_mean + (1 - m) * mean).astype(params.running_mean.dtype),
                        running_var=(m * params.running_var + (1 - m) * unbiased).astype(params.running_var.dtype))
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
        xc = x - mean[None, :, None, None]
        stats = params
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = xc * inv[None, :, None, None]
    y = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    return y.astype(x.dtype, copy=False), (xhat, inv, params.gamma, mode), stats


def batchnorm_backward(dy: np.ndarray, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv, gamma, mode = cache
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if mode == "infer":
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = (inv[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


def batchnorm(x: np.ndarray, params: BatchNormParams, mode: str = "infer") -> np.ndarray:
    return batchnorm_forward(x, params, mode)[0]


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(dy: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (dy - (dy * probs).sum(axis=axis, keepdims=True))


def smooth_l1(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    return np.where(a < 1, 0.5 * x * x, a - 0.5)


def smooth_l1_backward(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAILED"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:g}) at input {self.worst_input} index {self.worst_index}: "
                f"analytic {self.analytic:.6e} vs numeric {self.numeric:.6e}")


def check_gradients(forward: Callable, backward: Callable, inputs: Sequence[np.ndarray],
                    tolerance: float = 1e-4, step: float = 1e-5, seed: int = 0,
                    wrt: Optional[Sequence[int]] = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``forward(*inputs)`` returns ``(out, cache)`` and ``backward(dout, cache)``
    returns one gradient per input (a tuple, or a bare array for a single
    input). The scalar being differentiated is ``sum(out * r)`` for a fixed
    random ``r``. Element errors are ``|a - n| / max(|a|, |n|, 1e-3 * scale)``
    where ``scale`` is the largest analytic magnitude of that input, so that
    near-zero entries do not turn rounding noise into huge relative errors.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out, cache = forward(*inputs)
    out = np.asarray(out, dtype=np.float64)
    r = np.random.default_rng([seed, 0x9E3779B9]).standard_normal(out.shape)
    grads = backward(r if out.ndim else float(r), cache)
    if not isinstance(grads, tuple):
        grads = (grads,)
    wrt = range(len(inputs)) if wrt is None else wrt

    worst = None
    for k in wrt:
        analytic = np.asarray(grads[k], dtype=np.float64)
        if analytic.shape != inputs[k].shape:
            raise ValueError(f"gradient {k} has shape {analytic.shape}, input has {inputs[k].shape}")
        scale = max(np.abs(analytic).max(initial=0.0), 1e-12)
        for idx in np.ndindex(inputs[k].shape):
            orig = inputs[k][idx]
            inputs[k][idx] = orig + step
            fp = float(np.sum(np.asarray(forward(*inputs)[0]) * r))
            inputs[k][idx] = orig - step
            fm = float(np.sum(np.asarray(forward(*inputs)[0]) * r))
            inputs[k][idx] = orig
            num = (fp - fm) / (2 * step)
            a = analytic[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-3 * scale)
            if worst is None or err > worst[0]:
                worst = (err, k, idx, a, num)
    if worst is None:
        raise ValueError("no inputs selected for gradient checking")
    return GradCheckReport(*worst, tolerance)
