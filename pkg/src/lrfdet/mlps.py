"""Multi-level position-sensitive score maps and RoI pooling.

Bank channel order: class maps use ``c * k*k + m * k + n`` and regression
maps ``coord * k*k + m * k + n`` for bin row ``m`` and column ``n``. Bin
(m, n) of a RoI reads only its own map and averages the whole feature
pixels it covers; bin edges are snapped outward (floor start, ceil end).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import nn
from .boxes import BBox, decode_boxes
from .rpn import LossTerms, detection_loss

DEFAULT_K = 7


@dataclass
class PSBanks:
    cls_maps: np.ndarray  # (1, k*k*(C+1), H, W)
    reg_maps: np.ndarray  # (1, 4*k*k, H, W)
    k: int
    stride: int = 16

    @property
    def num_classes(self) -> int:
        """Classes including background."""
        return self.cls_maps.shape[1] // (self.k * self.k)


def ps_banks_forward(fused: np.ndarray, tensors, k: int = DEFAULT_K):
    w_cls, w_reg = tensors["ps.cls.weight"], tensors["ps.bbox.weight"]
    if fused.ndim != 4 or fused.shape[1] != w_cls.shape[1]:
        raise ValueError(f"score banks expect {w_cls.shape[1]} input channels, got shape {fused.shape}")
    if w_cls.shape[0] % (k * k) or w_reg.shape[0] != 4 * k * k:
        raise ValueError(f"bank widths {w_cls.shape[0]}/{w_reg.shape[0]} inconsistent with k={k}")
    cls_maps, c1 = nn.conv2d_forward(fused, nn.ConvKernel(w_cls, tensors["ps.cls.bias"]))
    reg_maps, c2 = nn.conv2d_forward(fused, nn.ConvKernel(w_reg, tensors["ps.bbox.bias"]))
    return PSBanks(cls_maps, reg_maps, k), (c1, c2)


def ps_banks_backward(dcls, dreg, cache, grads):
    c1, c2 = cache
    dx1, grads["ps.cls.weight"], grads["ps.cls.bias"] = nn.conv2d_backward(dcls, c1)
    dx2, grads["ps.bbox.weight"], grads["ps.bbox.bias"] = nn.conv2d_backward(dreg, c2)
    return dx1 + dx2


def ps_banks(fused: np.ndarray, tensors, k: int = DEFAULT_K) -> PSBanks:
    return ps_banks_forward(fused, tensors, k)[0]


def bin_edges(rois: np.ndarray, k: int, stride: int, height: int, width: int):
    """Integer bin edges, each ``(R, k)``: (hstart, hend, wstart, wend)."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4) / stride
    steps = np.arange(k)
    bw = (rois[:, 2] - rois[:, 0]) / k
    bh = (rois[:, 3] - rois[:, 1]) / k
    hs = np.floor(rois[:, 1:2] + steps * bh[:, None])
    he = np.ceil(rois[:, 1:2] + (steps + 1) * bh[:, None])
    ws = np.floor(rois[:, 0:1] + steps * bw[:, None])
    we = np.ceil(rois[:, 0:1] + (steps + 1) * bw[:, None])
    clip = lambda a, hi: a.clip(0, hi).astype(np.int64)
    return clip(hs, height), clip(he, height), clip(ws, width), clip(we, width)


def _bin_index(rois, maps_shape, k, groups, stride):
    _, height, width = maps_shape
    hs, he, ws, we = bin_edges(rois, k, stride, height, width)
    # broadcast to (R, k, k, G)
    hs_, he_ = hs[:, :, None, None], he[:, :, None, None]
    ws_, we_ = ws[:, None, :, None], we[:, None, :, None]
    m = np.arange(k)[None, :, None, None]
    n = np.arange(k)[None, None, :, None]
    g = np.arange(groups)[None, None, None, :]
    channel = np.broadcast_to(g * k * k + m * k + n, (len(hs), k, k, groups))
    count = (he_ - hs_) * (we_ - ws_)
    return channel, hs_, he_, ws_, we_, np.broadcast_to(count, channel.shape)


def psroi_pool_forward(maps: np.ndarray, rois: np.ndarray, k: int, groups: int, stride: int = 16):
    """Average each RoI bin over its own map.

    ``maps`` is ``(groups * k*k, H, W)``; returns ``(R, k, k, groups)`` and a cache.
    Sums come from a summed-area table, so every bin costs four lookups.
    """
    if maps.shape[0] != groups * k * k:
        raise ValueError(f"expected {groups * k * k} maps, got {maps.shape[0]}")
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    _, height, width = maps.shape
    outside = ((rois[:, 2] <= 0) | (rois[:, 3] <= 0)
               | (rois[:, 0] >= width * stride) | (rois[:, 1] >= height * stride))
    if np.any(outside):
        raise ValueError(f"RoI {rois[np.argmax(outside)].tolist()} lies fully outside the feature map")
    if np.any(rois[:, 2] <= rois[:, 0]) or np.any(rois[:, 3] <= rois[:, 1]):
        raise ValueError("RoIs must have positive area")
    sat = np.zeros((maps.shape[0], height + 1, width + 1), dtype=np.float64)
    sat[:, 1:, 1:] = maps.astype(np.float64).cumsum(axis=1).cumsum(axis=2)
    channel, hs, he, ws, we, count = _bin_index(rois, maps.shape, k, groups, stride)
    total = sat[channel, he, we] - sat[channel, hs, we] - sat[channel, he, ws] + sat[channel, hs, ws]
    with np.errstate(invalid="ignore", divide="ignore"):
        pooled = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return pooled.astype(maps.dtype, copy=False), (maps.shape, rois, k, groups, stride)


def psroi_pool_backward(dpooled: np.ndarray, cache) -> np.ndarray:
    """Spread each bin gradient uniformly (1/N) over the pixels it averaged."""
    shape, rois, k, groups, stride = cache
    c, height, width = shape
    channel, hs, he, ws, we, count = _bin_index(rois, shape, k, groups, stride)
    v = np.where(count > 0, dpooled.astype(np.float64) / np.maximum(count, 1), 0.0)
    # 2-D difference array: +v at (hs, ws), -v at (hs, we), (he, ws), +v at (he, we)
    stride_c, stride_h = (height + 1) * (width + 1), width + 1
    diff = np.zeros(c * stride_c)
    for rr, cc, sign in ((hs, ws, 1.0), (hs, we, -1.0), (he, ws, -1.0), (he, we, 1.0)):
        flat = (channel * stride_c + np.broadcast_to(rr, channel.shape) * stride_h
                + np.broadcast_to(cc, channel.shape)).ravel()
        diff += sign * np.bincount(flat, weights=v.ravel(), minlength=diff.size)
    grad = diff.reshape(c, height + 1, width + 1).cumsum(axis=1).cumsum(axis=2)[:, :height, :width]
    return grad


def mlps_roi_pool(banks: PSBanks, roi) -> Tuple[np.ndarray, np.ndarray]:
    """Pooled ``(k, k, C+1)`` class scores and ``(k, k, 4)`` regression values for one RoI."""
    box = roi.as_array() if isinstance(roi, BBox) else np.asarray(roi, dtype=np.float64)
    cls, _ = psroi_pool_forward(banks.cls_maps[0], box, banks.k, banks.num_classes, banks.stride)
    reg, _ = psroi_pool_forward(banks.reg_maps[0], box, banks.k, 4, banks.stride)
    return cls[0], reg[0]


def vote(pooled: np.ndarray, average: bool = False) -> np.ndarray:
    """Sum (or mean, with ``average``) of bin values over the k x k grid; batched on leading axes."""
    total = pooled.sum(axis=(-3, -2))
    if average:
        return total / (pooled.shape[-3] * pooled.shape[-2])
    return total


def vote_and_score(pooled: np.ndarray, average: bool = False):
    """Returns ``(P_c, s_c)``: per-class votes and their softmax."""
    votes = vote(pooled, average)
    return votes, nn.softmax(votes.astype(np.float64), axis=-1)


def regress_roi(pooled_reg: np.ndarray) -> np.ndarray:
    """Mean of the regression bins: a 4-vector of box offsets (batched on leading axes)."""
    return pooled_reg.mean(axis=(-3, -2))


def refine_roi(roi, pooled_reg: np.ndarray) -> np.ndarray:
    return decode_boxes(np.asarray(roi, dtype=np.float64), regress_roi(pooled_reg))


def roi_loss(pooled_cls: np.ndarray, pooled_reg: np.ndarray, labels: np.ndarray,
             targets: np.ndarray, lam: float = 1.0, average: bool = False):
    """Joint loss on a RoI minibatch from pooled bins ``(R, k, k, C+1)`` / ``(R, k, k, 4)``.

    Returns ``(LossTerms, dpooled_cls, dpooled_reg)``.
    """
    k = pooled_cls.shape[1]
    logits = vote(pooled_cls, average)
    deltas = regress_roi(pooled_reg)
    terms, dlogits, ddeltas = detection_loss(logits, deltas, labels, targets, lam)
    scale_cls = 1.0 / (k * k) if average else 1.0
    dcls = np.broadcast_to((dlogits * scale_cls)[:, None, None, :], pooled_cls.shape).copy()
    dreg = np.broadcast_to((ddeltas / (k * k))[:, None, None, :], pooled_reg.shape).copy()
    return terms, dcls, dreg
