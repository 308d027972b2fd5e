"""Multi-scale feature fusion blocks.

Both blocks bring every tap to the coarsest tap's resolution (max pooling
with window = stride = size ratio), apply a per-tap 1x1 lateral convolution
followed by batch norm, and concatenate in tap order. MFF_1 then encodes
with a 3x3 convolution + ReLU; MFF_2 with a 1x1 encode and a 1x1 reduce + ReLU.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .backbone import channel_mean_map
from .layers import LayerSpec, backprop_sequential, layer_backward, layer_forward, run_sequential


@dataclass(frozen=True)
class MFFParams:
    """Structure of one fusion block; the weights live in the shared tensor dict."""

    block: str
    taps: Tuple[Tuple[str, int], ...]  # (tap name, channels) in concatenation order
    lateral_width: int
    post: Tuple[LayerSpec, ...]

    @property
    def out_channels(self) -> int:
        return self.post[-1].out_channels

    def lateral_spec(self, tap: str, channels: int) -> LayerSpec:
        return LayerSpec(f"{self.block}.lateral.{tap}", "conv", channels, self.lateral_width, 1, bn=True)

    def specs(self) -> List[LayerSpec]:
        return [self.lateral_spec(t, c) for t, c in self.taps] + list(self.post)


def mff1_params(taps: Sequence[Tuple[str, int]], lateral_width: int = 192, width: int = 512) -> MFFParams:
    concat = lateral_width * len(taps)
    return MFFParams("mff1", tuple(taps), lateral_width,
                     (LayerSpec("mff1.fuse", "conv", concat, width, 3, 1, 1, bias=True, relu=True),))


def mff2_params(taps: Sequence[Tuple[str, int]], lateral_width: int = 192,
                widths: Tuple[int, int] = (512, 256)) -> MFFParams:
    concat = lateral_width * len(taps)
    return MFFParams("mff2", tuple(taps), lateral_width, (
        LayerSpec("mff2.encode", "conv", concat, widths[0], 1, bias=True),
        LayerSpec("mff2.reduce", "conv", widths[0], widths[1], 1, bias=True, relu=True)))


def align_factors(taps: Dict[str, np.ndarray]) -> Dict[str, int]:
    """Integer downsampling factor per tap to reach the coarsest tap's size."""
    sizes = {t: x.shape[2:] for t, x in taps.items()}
    th, tw = min(s[0] for s in sizes.values()), min(s[1] for s in sizes.values())
    factors = {}
    for t, (h, w) in sizes.items():
        f = h // th
        if f * th != h or f * tw != w:
            raise ValueError(f"misaligned taps: {t} is {h}x{w}, not an integer multiple of {th}x{tw}")
        factors[t] = f
    return factors


def _pool_spec(block: str, tap: str, channels: int, factor: int) -> LayerSpec:
    return LayerSpec(f"{block}.pool.{tap}", "maxpool", channels, channels, factor, factor, ceil_mode=False)


def align_taps(taps: Dict[str, np.ndarray]):
    """Pool each tap down to the coarsest resolution; returns (aligned, caches)."""
    factors = align_factors(taps)
    aligned, caches = {}, {}
    for t, x in taps.items():
        if factors[t] > 1:
            aligned[t], caches[t] = layer_forward(_pool_spec("align", t, x.shape[1], factors[t]), None, x, "infer")
        else:
            aligned[t] = x
    return aligned, caches, factors


def mff_forward(taps: Dict[str, np.ndarray], tensors, block: MFFParams, mode: str = "infer",
                stats: dict = None):
    """Returns ``(out, cache)``."""
    for t, c in block.taps:
        if t not in taps:
            raise ValueError(f"{block.block}: missing tap {t}")
        if taps[t].shape[1] != c:
            raise ValueError(f"{block.block}: tap {t} has {taps[t].shape[1]} channels, expected {c}")
    aligned, pool_caches, factors = align_taps({t: taps[t] for t, _ in block.taps})
    laterals, lat_caches = [], []
    for t, c in block.taps:
        y, cache = layer_forward(block.lateral_spec(t, c), tensors, aligned[t], mode, stats)
        laterals.append(y)
        lat_caches.append(cache)
    concat = np.concatenate(laterals, axis=1)
    out, _, trace = run_sequential(block.post, tensors, concat, mode, stats=stats)
    return out, (pool_caches, factors, lat_caches, trace)


def mff_backward(dout: np.ndarray, cache, block: MFFParams, grads: dict) -> Dict[str, np.ndarray]:
    """Gradients with respect to each input tap."""
    pool_caches, factors, lat_caches, trace = cache
    dconcat = backprop_sequential(trace, dout, grads)
    dtaps = {}
    w = block.lateral_width
    for i, ((t, c), lc) in enumerate(zip(block.taps, lat_caches)):
        d = layer_backward(block.lateral_spec(t, c), dconcat[:, i * w:(i + 1) * w], lc, grads)
        if factors[t] > 1:
            d = layer_backward(_pool_spec("align", t, c, factors[t]), d, pool_caches[t], grads)
        dtaps[t] = d
    return dtaps


def mff1(taps: Dict[str, np.ndarray], tensors, block: MFFParams = None, mode: str = "infer") -> np.ndarray:
    block = block or mff1_params([(t, x.shape[1]) for t, x in taps.items()])
    return mff_forward(taps, tensors, block, mode)[0]


def mff2(taps: Dict[str, np.ndarray], tensors, block: MFFParams = None, mode: str = "infer") -> np.ndarray:
    block = block or mff2_params([(t, x.shape[1]) for t, x in taps.items()])
    return mff_forward(taps, tensors, block, mode)[0]


def dump_concat_map(taps: Dict[str, np.ndarray]) -> np.ndarray:
    """Channel mean of the raw aligned concatenation of the taps."""
    aligned, _, _ = align_taps(taps)
    return channel_mean_map(np.concatenate([aligned[t] for t in taps], axis=1))
