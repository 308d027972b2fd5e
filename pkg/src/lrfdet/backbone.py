"""RFDNet: a stem convolution, eight DSF modules and three pooling stages.

A DSF module is squeeze 1x1 -> 3x3 depthwise -> pointwise 1x1, each followed
by batch norm and ReLU. Layer widths default to the published layer table;
``BackboneConfig.desk`` divides every width for CPU-sized experiments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

import numpy as np

from . import nn
from .layers import (LayerParams, LayerSpec, check_chain, init_tensors, run_sequential)

TABLE_DSF_WIDTHS = (64, 64, 128, 128, 256, 256, 512, 512)
DSF_NAMES = tuple(f"dsf{i}" for i in range(2, 10))
# pooling layer inserted after these modules
POOL_AFTER = {"conv1": "mp1", "dsf3": "mp3", "dsf5": "mp5"}
INPUT_MULTIPLE = 16

# feature-dump tap name -> layer whose output is read
TAP_LAYERS = {"CONV1": "conv1", "MP1": "mp1", "MP3": "mp3", "MP5": "mp5"}
TAP_LAYERS.update({name.upper(): f"{name}.pointwise" for name in DSF_NAMES})


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    stem_width: int = 64
    dsf_widths: Tuple[int, ...] = TABLE_DSF_WIDTHS
    classifier_classes: int = 1000
    detection_mode: bool = False

    @classmethod
    def desk(cls, divisor: int = 8, detection_mode: bool = True) -> "BackboneConfig":
        return cls(stem_width=64 // divisor,
                   dsf_widths=tuple(w // divisor for w in TABLE_DSF_WIDTHS),
                   detection_mode=detection_mode)

    def width(self, module: str) -> int:
        return self.dsf_widths[DSF_NAMES.index(module)]


def dsf_layers(name: str, in_channels: int, width: int) -> List[LayerSpec]:
    return [
        LayerSpec(f"{name}.squeeze", "conv", in_channels, width, 1, bn=True, relu=True),
        LayerSpec(f"{name}.dw", "dwconv", width, width, 3, 1, 1, bn=True, relu=True),
        LayerSpec(f"{name}.pointwise", "conv", width, width, 1, bn=True, relu=True),
    ]


def rfdnet_layers(config: BackboneConfig) -> List[LayerSpec]:
    if len(config.dsf_widths) != len(DSF_NAMES):
        raise ValueError(f"expected {len(DSF_NAMES)} DSF widths, got {len(config.dsf_widths)}")
    c = config.stem_width
    specs = [LayerSpec("conv1", "conv", config.input_channels, c, 3, 2, 1, bn=True, relu=True),
             LayerSpec("mp1", "maxpool", c, c, 3, 2)]
    for name, width in zip(DSF_NAMES, config.dsf_widths):
        specs += dsf_layers(name, c, width)
        c = width
        if name in POOL_AFTER:
            specs.append(LayerSpec(POOL_AFTER[name], "maxpool", c, c, 3, 2))
    if not config.detection_mode:
        specs += [LayerSpec("conv10", "conv", c, config.classifier_classes, 1, bias=True),
                  LayerSpec("avgpool", "avgpool", config.classifier_classes, config.classifier_classes)]
    check_chain(specs, config.input_channels)
    return specs


def tap_stride(tap: str) -> int:
    """Spatial stride of a lowercase DSF tap ('dsf4' -> 8)."""
    idx = DSF_NAMES.index(tap)
    return 4 * 2 ** sum(1 for name in ("dsf3", "dsf5") if DSF_NAMES.index(name) < idx)


def build_rfdnet(config: BackboneConfig, seed: int = 0, dtype=np.float32) -> LayerParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    return LayerParams(config, init_tensors(rfdnet_layers(config), rng, dtype=dtype))


def backbone_config(params) -> BackboneConfig:
    config = params.config
    return getattr(config, "backbone", config)


def check_input(image: np.ndarray, config: BackboneConfig, multiple: int = INPUT_MULTIPLE):
    if image.ndim != 4 or image.shape[1] != config.input_channels:
        raise ValueError(f"image must be (N, {config.input_channels}, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if h % multiple or w % multiple:
        th, tw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
        raise ValueError(f"input {h}x{w} is not a multiple of {multiple}; "
                         f"letterbox it to {th}x{tw} (see synth.letterbox)")


def backbone_forward(params: LayerParams, image: np.ndarray, mode: str = "infer",
                     keep: Iterable[str] = (), stats: dict = None, upto: str = None):
    """Run the backbone, optionally stopping after layer ``upto``.

    Returns ``(out, kept, trace)`` as ``layers.run_sequential``.
    """
    specs = rfdnet_layers(backbone_config(params))
    if upto is not None:
        names = [s.name for s in specs]
        specs = specs[:names.index(upto) + 1]
    return run_sequential(specs, params.tensors, image, mode, keep, stats)


def forward_features(params: LayerParams, image: np.ndarray,
                     taps: Iterable[str] = ("dsf4", "dsf7", "dsf9"),
                     mode: str = "infer") -> Dict[str, np.ndarray]:
    """Detection feature taps keyed by lowercase module name."""
    config = backbone_config(params)
    check_input(image, config)
    taps = list(taps)
    layers = {t: f"{t}.pointwise" for t in taps}
    last = max(layers.values(), key=lambda n: DSF_NAMES.index(n.split(".")[0]))
    _, kept, _ = backbone_forward(params, image, mode, keep=layers.values(), upto=last)
    return {t: kept[layer] for t, layer in layers.items()}


def forward_classifier(params: LayerParams, image: np.ndarray) -> np.ndarray:
    """Class probabilities ``(N, classifier_classes)``."""
    config = backbone_config(params)
    if config.detection_mode or "conv10.weight" not in params:
        raise ValueError("classifier forward requires classifier-mode parameters (detection_mode=False)")
    out, _, _ = backbone_forward(params, image)
    return nn.softmax(out[:, :, 0, 0].astype(np.float64), axis=1)


def channel_mean_map(features: np.ndarray) -> np.ndarray:
    """Average over channels of a single (C, H, W) or (1, C, H, W) feature map."""
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise ValueError("channel_mean_map expects a single image")
        features = features[0]
    return features.mean(axis=0)


def to_uint8(m: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, np.uint8)
    return np.round((m - lo) / (hi - lo) * 255).astype(np.uint8)


def tap_output(params: LayerParams, image: np.ndarray, tap_name: str, mode: str = "infer") -> np.ndarray:
    key = tap_name.upper()
    if key not in TAP_LAYERS:
        raise ValueError(f"unknown tap {tap_name!r}; choose from {sorted(TAP_LAYERS)}")
    layer = TAP_LAYERS[key]
    _, kept, _ = backbone_forward(params, image, mode, keep=[layer], upto=layer)
    return kept[layer]


def dump_average_feature_map(params: LayerParams, image: np.ndarray, tap_name: str):
    """Channel-mean map at a named tap, plus its 8-bit visualization."""
    m = channel_mean_map(tap_output(params, image, tap_name))
    return m, to_uint8(m)
