"""The full detector: RFDNet taps -> MFF_1 -> multi-RPN proposals and
MFF_2 -> position-sensitive banks -> per-RoI class scores and boxes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import mlps
from .backbone import (BackboneConfig, backbone_config, backbone_forward, check_input,
                       rfdnet_layers, tap_stride)
from .boxes import BBox, clip_boxes, decode_boxes, nms
from .fusion import MFFParams, mff1_params, mff2_params, mff_forward
from .layers import INIT_STD, LayerParams, LayerSpec, init_tensors
from .rpn import AnchorGrid, generate_anchors, propose, rpn_heads_forward

# lateral widths by number of fused taps, as in the layer-combination ablation
LATERAL_WIDTHS = {1: 512, 2: 256, 3: 192}
DESK_DIVISOR = 4


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(detection_mode=True))
    taps: Tuple[str, ...] = ("dsf4", "dsf7", "dsf9")
    lateral_width: Optional[int] = None
    mff1_width: int = 512
    mff2_widths: Tuple[int, int] = (512, 256)
    classes: Tuple[str, ...] = ("part", "fault")
    k: int = 7
    anchor_scales: Tuple[float, ...] = (32.0, 64.0, 128.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    average_vote: bool = False
    lam: float = 1.0
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    rpn_nms_iou: float = 0.7
    train_pre_nms: int = 2000
    train_post_nms: int = 300
    test_pre_nms: int = 300
    test_post_nms: int = 100
    init_std: Optional[float] = 0.01  # None: fan-in scaled
    # normalize with each input's own statistics at inference instead of the
    # running averages; matches training when every batch is a single image
    image_statistics: bool = False

    @classmethod
    def desk(cls, divisor: int = DESK_DIVISOR, **overrides) -> "DetectorConfig":
        base = cls(backbone=BackboneConfig.desk(divisor), lateral_width=192 // divisor,
                   mff1_width=512 // divisor, mff2_widths=(512 // divisor, 256 // divisor),
                   init_std=None, image_statistics=True, average_vote=True)
        return replace(base, **overrides)

    @property
    def inference_mode(self) -> str:
        return "train" if self.image_statistics else "infer"

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def num_classes(self) -> int:
        """Including background."""
        return len(self.classes) + 1

    @property
    def feature_stride(self) -> int:
        return max(tap_stride(t) for t in self.taps)

    @property
    def lateral(self) -> int:
        if self.lateral_width is not None:
            return self.lateral_width
        return LATERAL_WIDTHS.get(len(self.taps), 192)

    def tap_channels(self) -> List[Tuple[str, int]]:
        return [(t, self.backbone.width(t)) for t in self.taps]

    def mff1(self) -> MFFParams:
        return mff1_params(self.tap_channels(), self.lateral, self.mff1_width)

    def mff2(self) -> MFFParams:
        return mff2_params(self.tap_channels(), self.lateral, self.mff2_widths)

    def head_specs(self) -> List[LayerSpec]:
        a, kk = self.num_anchors, self.k * self.k
        return [LayerSpec("rpn.cls", "conv", self.mff1_width, 2 * a, 1, bias=True),
                LayerSpec("rpn.bbox", "conv", self.mff1_width, 4 * a, 1, bias=True),
                LayerSpec("ps.cls", "conv", self.mff2_widths[1], kk * self.num_classes, 1, bias=True),
                LayerSpec("ps.bbox", "conv", self.mff2_widths[1], 4 * kk, 1, bias=True)]

    def new_layer_specs(self) -> List[LayerSpec]:
        return self.mff1().specs() + self.mff2().specs() + self.head_specs()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        bb = d.pop("backbone")
        bb["dsf_widths"] = tuple(bb["dsf_widths"])
        for key, value in d.items():
            if isinstance(value, list):
                d[key] = tuple(value)
        return cls(backbone=BackboneConfig(**bb), **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def detector_specs(config: DetectorConfig) -> List[LayerSpec]:
    return rfdnet_layers(config.backbone) + config.new_layer_specs()


def build_detector(config: DetectorConfig, seed: int = 0, dtype=np.float32) -> LayerParams:
    """Gaussian initialization (no pretrained backbone). Hidden layers use
    ``config.init_std``, or fan-in scaling when that is ``None``; the four
    prediction heads always start at std 0.01."""
    if not config.backbone.detection_mode:
        config = replace(config, backbone=replace(config.backbone, detection_mode=True))
    rng = np.random.Generator(np.random.PCG64(seed))
    hidden = rfdnet_layers(config.backbone) + config.mff1().specs() + config.mff2().specs()
    tensors = init_tensors(hidden, rng, config.init_std, dtype)
    tensors.update(init_tensors(config.head_specs(), rng, INIT_STD, dtype))
    return LayerParams(config, tensors)


_ANCHOR_CACHE: Dict[tuple, AnchorGrid] = {}


def anchors_for(config: DetectorConfig, feature_h: int, feature_w: int) -> AnchorGrid:
    key = (feature_h, feature_w, config.feature_stride, config.anchor_scales, config.anchor_ratios)
    if key not in _ANCHOR_CACHE:
        _ANCHOR_CACHE[key] = generate_anchors(feature_h, feature_w, config.feature_stride,
                                              config.anchor_scales, config.anchor_ratios)
    return _ANCHOR_CACHE[key]


@dataclass
class Detection:
    box: np.ndarray
    label: int  # 1-based class index; 0 is background
    class_name: str
    score: float

    def as_bbox(self) -> BBox:
        return BBox(*map(float, self.box), score=self.score, label=self.class_name)

    def record(self, image_id: str) -> dict:
        """JSON-lines detection record."""
        return {"id": image_id, "cls": self.class_name, "score": round(float(self.score), 6),
                "box": [round(float(v), 2) for v in self.box]}


class ForwardCounter:
    """Counts backbone passes; used to check taps are shared by both fusion blocks."""

    calls = 0


def shared_taps(params: LayerParams, image: np.ndarray, mode: Optional[str] = None, stats: dict = None):
    """One backbone pass producing every configured tap. Returns ``(taps, trace)``.

    ``mode`` defaults to the configuration's inference mode.
    """
    config: DetectorConfig = params.config
    mode = mode or config.inference_mode
    check_input(image, config.backbone, config.feature_stride)
    layers = {t: f"{t}.pointwise" for t in config.taps}
    ForwardCounter.calls += 1
    _, kept, trace = backbone_forward(params, image, mode, keep=layers.values(), stats=stats)
    return {t: kept[layer] for t, layer in layers.items()}, trace


def score_rois(params: LayerParams, banks: mlps.PSBanks, rois: np.ndarray):
    """Class probabilities ``(R, C+1)`` and refined boxes ``(R, 4)`` for RoIs."""
    config: DetectorConfig = params.config
    cls, _ = mlps.psroi_pool_forward(banks.cls_maps[0], rois, banks.k, banks.num_classes, banks.stride)
    reg, _ = mlps.psroi_pool_forward(banks.reg_maps[0], rois, banks.k, 4, banks.stride)
    _, probs = mlps.vote_and_score(cls, config.average_vote)
    return probs, decode_boxes(rois, mlps.regress_roi(reg))


def detect(params: LayerParams, image: np.ndarray, confidence_threshold: float = 0.9,
           nms_iou: float = 0.3) -> List[Detection]:
    """End-to-end inference on a single ``(1, 3, H, W)`` image.

    Scores are thresholded first, then suppressed per class; the result is
    sorted by descending score.
    """
    config: DetectorConfig = params.config
    h, w = image.shape[2:]
    mode = config.inference_mode
    taps, _ = shared_taps(params, image, mode)
    f1, _ = mff_forward(taps, params.tensors, config.mff1(), mode)
    obj, deltas, _ = rpn_heads_forward(f1, params.tensors, config.num_anchors)
    grid = anchors_for(config, *f1.shape[2:])
    rois, _ = propose(obj, deltas, grid.anchors, (h, w), config.test_pre_nms,
                      config.rpn_nms_iou, config.test_post_nms)
    if len(rois) == 0:
        return []
    f2, _ = mff_forward(taps, params.tensors, config.mff2(), mode)
    banks, _ = mlps.ps_banks_forward(f2, params.tensors, config.k)
    banks.stride = config.feature_stride
    probs, boxes = score_rois(params, banks, rois)
    boxes = clip_boxes(boxes, h, w)
    out = []
    for c in range(1, config.num_classes):
        keep = np.flatnonzero(probs[:, c] >= confidence_threshold)
        if keep.size == 0:
            continue
        kept = keep[nms(boxes[keep], probs[keep, c], nms_iou)]
        out += [Detection(boxes[i], c, config.classes[c - 1], float(probs[i, c])) for i in kept]
    out.sort(key=lambda d: (-d.score, d.label))
    return out
