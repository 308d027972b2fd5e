"""Multi-RPN: anchors, objectness/regression heads, target assignment,
the joint classification + smooth-L1 loss, and proposal decoding.

Head layouts: objectness channel ``2 * a + {0: background, 1: fault region}``
and regression channel ``4 * a + coord`` for anchor ``a`` at each position.
Flattened anchors are ordered ``(y, x, a)`` with ``a = scale_idx * R + ratio_idx``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import nn
from .boxes import clip_boxes, decode_boxes, encode_boxes, iou_matrix, nms

DEFAULT_SCALES = (32.0, 64.0, 128.0)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)
IGNORE, BACKGROUND, FOREGROUND = -1, 0, 1


@dataclass
class AnchorGrid:
    stride: int
    scales: Tuple[float, ...]
    ratios: Tuple[float, ...]
    height: int
    width: int
    anchors: np.ndarray  # (height * width * A, 4)

    @property
    def per_position(self) -> int:
        return len(self.scales) * len(self.ratios)


def base_anchors(scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """Anchors centred on the origin: area ``s**2`` and width/height ``r``."""
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("anchor scales and ratios must be positive")
    out = []
    for s in scales:
        for r in ratios:
            w, h = s * np.sqrt(r), s / np.sqrt(r)
            out.append([-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h])
    return np.array(out, dtype=np.float64)


def generate_anchors(feature_h: int, feature_w: int, stride: int = 16,
                     scales: Sequence[float] = DEFAULT_SCALES,
                     ratios: Sequence[float] = DEFAULT_RATIOS) -> AnchorGrid:
    """Anchors centred at ``((x + 0.5) * stride, (y + 0.5) * stride)``."""
    base = base_anchors(scales, ratios)
    ys, xs = np.meshgrid(np.arange(feature_h), np.arange(feature_w), indexing="ij")
    cx = (xs.ravel() + 0.5) * stride
    cy = (ys.ravel() + 0.5) * stride
    shifts = np.stack([cx, cy, cx, cy], axis=1)
    anchors = (shifts[:, None, :] + base[None, :, :]).reshape(-1, 4)
    return AnchorGrid(stride, tuple(scales), tuple(ratios), feature_h, feature_w, anchors)


# --------------------------------------------------------------------------
# heads


def rpn_heads_forward(fused: np.ndarray, tensors, num_anchors: int = 9):
    """Sibling 1x1 convolutions on the fused map -> (objectness, deltas, cache)."""
    w_cls = tensors["rpn.cls.weight"]
    if fused.ndim != 4 or fused.shape[1] != w_cls.shape[1]:
        raise ValueError(f"rpn heads expect {w_cls.shape[1]} input channels, got shape {fused.shape}")
    if w_cls.shape[0] != 2 * num_anchors or tensors["rpn.bbox.weight"].shape[0] != 4 * num_anchors:
        raise ValueError("rpn head widths do not match the anchor count")
    obj, c1 = nn.conv2d_forward(fused, nn.ConvKernel(w_cls, tensors["rpn.cls.bias"]))
    deltas, c2 = nn.conv2d_forward(fused, nn.ConvKernel(tensors["rpn.bbox.weight"], tensors["rpn.bbox.bias"]))
    return obj, deltas, (c1, c2)


def rpn_heads_backward(dobj, ddeltas, cache, grads):
    c1, c2 = cache
    dx1, dw, db = nn.conv2d_backward(dobj, c1)
    grads["rpn.cls.weight"], grads["rpn.cls.bias"] = dw, db
    dx2, dw, db = nn.conv2d_backward(ddeltas, c2)
    grads["rpn.bbox.weight"], grads["rpn.bbox.bias"] = dw, db
    return dx1 + dx2


def rpn_heads(fused: np.ndarray, tensors, num_anchors: int = 9):
    obj, deltas, _ = rpn_heads_forward(fused, tensors, num_anchors)
    return obj, deltas


def flatten_heads(obj: np.ndarray, deltas: np.ndarray):
    """(1, 2A, H, W), (1, 4A, H, W) -> logits (H*W*A, 2), deltas (H*W*A, 4)."""
    _, c, h, w = obj.shape
    a = c // 2
    logits = obj[0].reshape(a, 2, h, w).transpose(2, 3, 0, 1).reshape(-1, 2)
    d = deltas[0].reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
    return logits, d


def unflatten_heads(dlogits: np.ndarray, ddeltas: np.ndarray, h: int, w: int):
    a = dlogits.shape[0] // (h * w)
    dobj = dlogits.reshape(h, w, a, 2).transpose(2, 3, 0, 1).reshape(1, 2 * a, h, w)
    dd = ddeltas.reshape(h, w, a, 4).transpose(2, 3, 0, 1).reshape(1, 4 * a, h, w)
    return np.ascontiguousarray(dobj), np.ascontiguousarray(dd)


# --------------------------------------------------------------------------
# targets


@dataclass
class RPNTargets:
    labels: np.ndarray   # (A,) in {-1, 0, 1}
    targets: np.ndarray  # (A, 4), zero where label != 1
    matched: np.ndarray  # (A,) index of the best-overlap ground truth, -1 if none


def inside_image(anchors: np.ndarray, height: int, width: int, border: float = 0.0) -> np.ndarray:
    return ((anchors[:, 0] >= -border) & (anchors[:, 1] >= -border)
            & (anchors[:, 2] <= width + border) & (anchors[:, 3] <= height + border))


def assign_anchor_targets(anchors: np.ndarray, gt_boxes: np.ndarray, iou_fg: float = 0.7,
                          iou_bg: float = 0.3, image_size: Optional[Tuple[int, int]] = None) -> RPNTargets:
    """Label anchors foreground / background / ignore by IoU with ground truth.

    An anchor is foreground when its best IoU reaches ``iou_fg`` or it is the
    best-overlapping anchor of some ground truth; background below ``iou_bg``.
    With ``image_size=(H, W)`` anchors crossing the border are ignored.
    """
    if not 0 <= iou_bg <= iou_fg <= 1:
        raise ValueError("need 0 <= iou_bg <= iou_fg <= 1")
    anchors = np.asarray(anchors, dtype=np.float64)
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    valid = np.ones(n, bool) if image_size is None else inside_image(anchors, *image_size)
    labels = np.full(n, IGNORE, np.int64)
    targets = np.zeros((n, 4))
    matched = np.full(n, -1, np.int64)
    if len(gt_boxes) == 0:
        labels[valid] = BACKGROUND
        return RPNTargets(labels, targets, matched)
    ious = iou_matrix(anchors, gt_boxes)
    ious[~valid] = -1.0
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    labels[valid & (best_iou < iou_bg)] = BACKGROUND
    gt_best = ious.max(axis=0)
    for g in range(len(gt_boxes)):
        if gt_best[g] > 0:
            hits = np.flatnonzero(ious[:, g] == gt_best[g])
            labels[hits] = FOREGROUND
            best[hits] = g
    labels[valid & (best_iou >= iou_fg)] = FOREGROUND
    fg = labels == FOREGROUND
    matched[valid] = best[valid]
    targets[fg] = encode_boxes(anchors[fg], gt_boxes[best[fg]])
    return RPNTargets(labels, targets, matched)


# --------------------------------------------------------------------------
# loss


@dataclass
class LossTerms:
    cls: float
    reg: float

    @property
    def total(self) -> float:
        return self.cls + self.reg


def detection_loss(logits: np.ndarray, deltas: np.ndarray, labels: np.ndarray,
                   targets: np.ndarray, lam: float = 1.0):
    """Cross-entropy on ``softmax(logits)[label]`` plus ``lam`` times smooth-L1
    on foreground rows (label > 0), both divided by the number of rows.

    Returns ``(LossTerms, dlogits, ddeltas)``.
    """
    m = len(labels)
    if m == 0:
        return LossTerms(0.0, 0.0), np.zeros_like(logits), np.zeros_like(deltas)
    labels = np.asarray(labels, dtype=np.int64)
    logp = nn.log_softmax(logits.astype(np.float64), axis=1)
    rows = np.arange(m)
    cls = -logp[rows, labels].sum() / m
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= m
    fg = (labels > 0)[:, None]
    diff = deltas.astype(np.float64) - targets
    reg = lam * float((nn.smooth_l1(diff) * fg).sum()) / m
    ddeltas = lam * nn.smooth_l1_backward(diff) * fg / m
    return (LossTerms(float(cls), reg), dlogits.astype(logits.dtype, copy=False),
            ddeltas.astype(deltas.dtype, copy=False))


def rpn_loss(objectness: np.ndarray, deltas: np.ndarray, targets: RPNTargets,
             sampled: np.ndarray, lam: float = 1.0):
    """Loss over the sampled anchor indices; gradients are dense head-shaped arrays.

    Returns ``(LossTerms, dobjectness, ddeltas)``.
    """
    h, w = objectness.shape[2:]
    logits, d = flatten_heads(objectness, deltas)
    terms, dl, dd = detection_loss(logits[sampled], d[sampled], targets.labels[sampled],
                                   targets.targets[sampled], lam)
    full_l = np.zeros_like(logits)
    full_d = np.zeros_like(d)
    full_l[sampled] = dl
    full_d[sampled] = dd
    dobj, ddel = unflatten_heads(full_l, full_d, h, w)
    return terms, dobj, ddel


# --------------------------------------------------------------------------
# proposals


def propose(objectness: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
            image_size: Tuple[int, int], pre_nms_n: int = 2000, nms_iou: float = 0.7,
            post_nms_n: int = 300, min_size: float = 1.0):
    """Decode, clip, rank and suppress. Returns ``(boxes (P, 4), scores (P,))``
    with scores non-increasing."""
    logits, d = flatten_heads(objectness, deltas)
    scores = nn.softmax(logits.astype(np.float64), axis=1)[:, 1]
    boxes = clip_boxes(decode_boxes(anchors, d), *image_size)
    w, h = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    ok = np.flatnonzero((w >= min_size) & (h >= min_size))
    order = ok[np.argsort(-scores[ok], kind="stable")][:pre_nms_n]
    keep = nms(boxes[order], scores[order], nms_iou, post_nms_n)
    sel = order[keep]
    return boxes[sel], scores[sel]
