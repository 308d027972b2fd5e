"""Box geometry in continuous pixel coordinates ``(x1, y1, x2, y2)``.

Width is ``x2 - x1`` (no +1 convention), so an anchor of scale 64 and ratio
1 is exactly 64x64 and IoU is 1 only for identical boxes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

# clamp for log-size offsets when decoding, keeps exp() finite
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    label: Optional[str] = None

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def widths_heights(boxes: np.ndarray):
    boxes = np.asarray(boxes, dtype=np.float64)
    return boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (A, 4) and (B, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    wa, ha = widths_heights(a)
    wb, hb = widths_heights(b)
    union = (wa * ha)[:, None] + (wb * hb)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _check_positive(w, h, what):
    if np.any(w <= 0) or np.any(h <= 0):
        raise ValueError(f"degenerate {what}: boxes must have positive width and height")


def encode_boxes(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Center/log-size offsets ``t*`` of ``gt`` relative to ``anchors``."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    aw, ah = widths_heights(anchors)
    gw, gh = widths_heights(gt)
    _check_positive(aw, ah, "anchor")
    _check_positive(gw, gh, "ground truth")
    ax, ay = anchors[..., 0] + 0.5 * aw, anchors[..., 1] + 0.5 * ah
    gx, gy = gt[..., 0] + 0.5 * gw, gt[..., 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw, ah = widths_heights(anchors)
    _check_positive(aw, ah, "anchor")
    ax, ay = anchors[..., 0] + 0.5 * aw, anchors[..., 1] + 0.5 * ah
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * np.exp(np.minimum(deltas[..., 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[..., 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box(anchor: BBox, gt: BBox) -> np.ndarray:
    return encode_boxes(anchor.as_array(), gt.as_array())


def decode_box(anchor: BBox, t) -> BBox:
    return BBox(*decode_boxes(anchor.as_array(), np.asarray(t, dtype=np.float64)))


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64)
    boxes[..., 0::2] = boxes[..., 0::2].clip(0, width)
    boxes[..., 1::2] = boxes[..., 1::2].clip(0, height)
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
        max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Ties in score keep the lower index first. ``max_keep`` stops early, with
    the same result as truncating the full output.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    w, h = widths_heights(boxes)
    areas = np.clip(w, 0, None) * np.clip(h, 0, None)
    keep = []
    while order.size and (max_keep is None or len(keep) < max_keep):
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ovr = np.where(union > 0, inter / union, 0.0)
        order = rest[ovr <= iou_threshold]
    return np.array(keep, dtype=np.int64)
