"""Analytic parameter, size and compute counts for layer specs.

Counts come from the same ``LayerSpec`` lists the networks run, so a
profiled model is the executed model. Conventions:

* parameters: every stored tensor element (weights, biases, and four
  batch-norm vectors per normalized layer);
* size: 4 bytes per parameter, reported in decimal MB and binary MiB;
* compute: multiply-adds ``K*K*P*Q*H'*W'`` for a convolution and
  ``K*K*P*H'*W'`` for a depthwise one; the second convention doubles it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn
from .backbone import BackboneConfig, channel_mean_map, rfdnet_layers, tap_output
from .layers import Arch, LayerSpec, check_chain

BYTES_PER_PARAM = 4
CONVENTIONS = ("mult-adds", "2x mult-adds")


@dataclass(frozen=True)
class LayerProfile:
    name: str
    kind: str
    output: Tuple[int, int, int]  # (C, H, W)
    weights: int  # convolution weights only
    params: int  # weights + bias + normalization
    mult_adds: int


@dataclass(frozen=True)
class ProfileReport:
    input_size: Tuple[int, int, int]
    layers: Tuple[LayerProfile, ...]

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def weights(self) -> int:
        return sum(l.weights for l in self.layers)

    @property
    def bytes(self) -> int:
        return self.params * BYTES_PER_PARAM

    @property
    def megabytes(self) -> float:
        return self.bytes / 1e6

    @property
    def mebibytes(self) -> float:
        return self.bytes / 2 ** 20

    @property
    def mult_adds(self) -> int:
        return sum(l.mult_adds for l in self.layers)

    def compute(self, convention: str) -> int:
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")
        return self.mult_adds * (2 if convention == CONVENTIONS[1] else 1)

    def closest_convention(self, target: float) -> Tuple[str, int, float]:
        """Convention whose total is nearest ``target``: ``(name, value, relative error)``."""
        best = min(CONVENTIONS, key=lambda c: abs(self.compute(c) - target))
        value = self.compute(best)
        return best, value, (value - target) / target

    def as_dict(self) -> dict:
        return {"input_size": list(self.input_size),
                "layers": [{"name": l.name, "kind": l.kind, "output": list(l.output), "weights": l.weights,
                            "params": l.params, "mult_adds": l.mult_adds} for l in self.layers],
                "totals": {"params": self.params, "weights": self.weights, "bytes": self.bytes,
                           "MB": self.megabytes, "MiB": self.mebibytes,
                           **{c: self.compute(c) for c in CONVENTIONS}}}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def table(self) -> str:
        head = f"{'layer':<22}{'output':>16}{'params':>12}{'mult-adds':>16}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            shape = "x".join(map(str, l.output))
            lines.append(f"{l.name:<22}{shape:>16}{l.params:>12,}{l.mult_adds:>16,}")
        lines.append("-" * len(head))
        lines.append(f"{'total':<22}{'':>16}{self.params:>12,}{self.mult_adds:>16,}")
        lines.append(f"model size: {self.megabytes:.2f} MB ({self.mebibytes:.2f} MiB) at {BYTES_PER_PARAM} bytes/param")
        for c in CONVENTIONS:
            lines.append(f"compute ({c}): {self.compute(c) / 1e6:.1f}M")
        return "\n".join(lines) + "\n"


def _output_hw(spec: LayerSpec, h: int, w: int) -> Tuple[int, int]:
    if spec.kind in ("conv", "dwconv"):
        return (nn.conv_output_size(h, spec.kernel, spec.stride, spec.padding),
                nn.conv_output_size(w, spec.kernel, spec.stride, spec.padding))
    if spec.kind == "maxpool":
        return (nn.pool_output_size(h, spec.kernel, spec.stride, spec.ceil_mode),
                nn.pool_output_size(w, spec.kernel, spec.stride, spec.ceil_mode))
    if spec.kind == "avgpool":
        return 1, 1
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def profile_layer(spec: LayerSpec, h: int, w: int) -> LayerProfile:
    oh, ow = _output_hw(spec, h, w)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"layer {spec.name} has an empty output for a {h}x{w} input")
    shapes = spec.param_shapes()
    weights = int(np.prod(shapes[f"{spec.name}.weight"])) if spec.kind in ("conv", "dwconv") else 0
    params = sum(int(np.prod(s)) for s in shapes.values())
    return LayerProfile(spec.name, spec.kind, (spec.out_channels, oh, ow), weights, params, weights * oh * ow)


def profile_network(arch: Arch, input_size: Union[int, Tuple[int, int], Tuple[int, int, int], None]) -> ProfileReport:
    """Per-layer counts for ``arch`` on an input of ``input_size``.

    ``input_size`` is a side length, ``(H, W)`` or ``(C, H, W)``; the channel
    count defaults to the first layer's input width.
    """
    if input_size is None:
        raise ValueError("input size is required to resolve layer shapes")
    first = next(iter(arch))
    first = first[0] if isinstance(first, tuple) else first
    if isinstance(input_size, int):
        size = (first.in_channels, input_size, input_size)
    elif len(input_size) == 2:
        size = (first.in_channels, *input_size)
    else:
        size = tuple(input_size)
    c, h, w = (int(v) for v in size)
    if min(c, h, w) <= 0:
        raise ValueError(f"input size must be positive, got {size}")
    check_chain(arch, c)
    rows: List[LayerProfile] = []
    for item in arch:
        branches = item if isinstance(item, tuple) else (item,)
        outs = [profile_layer(s, h, w) for s in branches]
        if len({o.output[1:] for o in outs}) != 1:
            raise ValueError(f"parallel branches {[s.name for s in branches]} disagree on output size")
        rows += outs
        h, w = outs[0].output[1:]
    return ProfileReport((c, int(size[1]), int(size[2])), tuple(rows))


def rfdnet_profile(input_size=224, config: Optional[BackboneConfig] = None) -> ProfileReport:
    """The classifier configuration by default (``conv10`` + global pooling included)."""
    return profile_network(rfdnet_layers(config or BackboneConfig()), input_size)


def _fire(name: str, in_ch: int, squeeze: int, expand: int) -> list:
    return [LayerSpec(f"{name}.squeeze", "conv", in_ch, squeeze, 1, bias=True, relu=True),
            (LayerSpec(f"{name}.expand1x1", "conv", squeeze, expand, 1, bias=True, relu=True),
             LayerSpec(f"{name}.expand3x3", "conv", squeeze, expand, 3, 1, 1, bias=True, relu=True))]


def squeezenet_arch(classes: int = 1000) -> list:
    """SqueezeNet 1.0 reference layout (biases, no normalization)."""
    arch = [LayerSpec("conv1", "conv", 3, 96, 7, 2, bias=True, relu=True),
            LayerSpec("maxpool1", "maxpool", 96, 96, 3, 2)]
    fires = [("fire2", 96, 16, 64), ("fire3", 128, 16, 64), ("fire4", 128, 32, 128), "maxpool4",
             ("fire5", 256, 32, 128), ("fire6", 256, 48, 192), ("fire7", 384, 48, 192),
             ("fire8", 384, 64, 256), "maxpool8", ("fire9", 512, 64, 256)]
    for f in fires:
        if isinstance(f, str):
            arch.append(LayerSpec(f, "maxpool", 256 if f == "maxpool4" else 512,
                                  256 if f == "maxpool4" else 512, 3, 2))
        else:
            arch += _fire(*f)
    arch += [LayerSpec("conv10", "conv", 512, classes, 1, bias=True, relu=True),
             LayerSpec("avgpool", "avgpool", classes, classes)]
    return arch


# --------------------------------------------------------------------------
# illumination diagnostic

ILLUMINATION_TAPS = ("MP1", "MP3", "MP5")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Cosine of two flattened maps; ``None`` when either has zero norm."""
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def illumination_similarity(params, image: np.ndarray, alphas: Sequence[float],
                            taps: Sequence[str] = ILLUMINATION_TAPS) -> dict:
    """``{alpha: {tap: similarity or None}}`` between channel-mean maps of
    ``clip(alpha * image)`` and the unscaled image."""
    from .synth import augment_illumination

    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    if any(a <= 0 for a in alphas):
        raise ValueError("alphas must be positive")
    if not np.any(image):
        # a blank input carries no illumination to vary
        return {float(a): {t: None for t in taps} for a in alphas}
    reference = {t: channel_mean_map(tap_output(params, image, t)) for t in taps}
    table = {}
    for alpha in alphas:
        scaled = augment_illumination(image, alpha)
        table[float(alpha)] = {t: cosine_similarity(reference[t], channel_mean_map(tap_output(params, scaled, t)))
                               for t in taps}
    return table
