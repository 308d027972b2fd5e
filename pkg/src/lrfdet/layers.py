"""Layer descriptions and a sequential runner with backprop.

A network is a list of ``LayerSpec``; parameters live in a flat
``{name: array}`` dict using ``<layer>.weight``, ``<layer>.bias`` and
``<layer>.bn.{gamma,beta,running_mean,running_var}``. The profiler reads
the same specs, so the counted network is the one that actually runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn

BN_KEYS = ("gamma", "beta", "running_mean", "running_var")
INIT_STD = 0.01


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | dwconv | maxpool | avgpool
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bn: bool = False
    relu: bool = False
    bias: bool = False
    ceil_mode: bool = True

    def param_shapes(self) -> Dict[str, tuple]:
        shapes = {}
        if self.kind == "conv":
            shapes[f"{self.name}.weight"] = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        elif self.kind == "dwconv":
            shapes[f"{self.name}.weight"] = (self.in_channels, self.kernel, self.kernel)
        if self.bias:
            shapes[f"{self.name}.bias"] = (self.out_channels,)
        if self.bn:
            for key in BN_KEYS:
                shapes[f"{self.name}.bn.{key}"] = (self.out_channels,)
        return shapes


# A tuple of specs is a set of parallel branches fed the same input whose
# outputs are concatenated along channels (SqueezeNet Fire expand layers).
Arch = Sequence[Union[LayerSpec, Tuple[LayerSpec, ...]]]


def iter_specs(arch: Arch) -> Iterable[LayerSpec]:
    for item in arch:
        if isinstance(item, tuple):
            yield from item
        else:
            yield item


def check_chain(arch: Arch, in_channels: int) -> int:
    """Verify every layer's input width matches its predecessor; return the output width."""
    c = in_channels
    for item in arch:
        branches = item if isinstance(item, tuple) else (item,)
        out = 0
        for spec in branches:
            if spec.in_channels != c:
                raise ValueError(f"inconsistent channel chain at {spec.name}: "
                                 f"expects {spec.in_channels} input channels, receives {c}")
            if spec.kind == "dwconv" and spec.out_channels != spec.in_channels:
                raise ValueError(f"depthwise layer {spec.name} must keep its channel count")
            out += spec.out_channels
        c = out
    return c


def is_weight(name: str) -> bool:
    return name.endswith(".weight")


def init_tensors(specs: Iterable[LayerSpec], rng: np.random.Generator,
                 std: Optional[float] = INIT_STD, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Gaussian(0, std) weights, zero bias/beta, unit gamma, identity running stats.

    ``std=None`` scales each weight by ``sqrt(2 / fan_in)`` instead.
    """
    tensors = {}
    for spec in specs:
        for name, shape in spec.param_shapes().items():
            if is_weight(name):
                scale = std if std is not None else float(np.sqrt(2.0 / np.prod(shape[1:])))
                tensors[name] = (rng.standard_normal(shape) * scale).astype(dtype)
            elif name.endswith(("bn.gamma", "bn.running_var")):
                tensors[name] = np.ones(shape, dtype)
            else:
                tensors[name] = np.zeros(shape, dtype)
    return tensors


def bn_params(tensors: Dict[str, np.ndarray], prefix: str) -> nn.BatchNormParams:
    return nn.BatchNormParams(*(tensors[f"{prefix}.bn.{k}"] for k in BN_KEYS))


def _conv_kernel(spec: LayerSpec, tensors):
    bias = tensors[f"{spec.name}.bias"] if spec.bias else None
    return nn.ConvKernel(tensors[f"{spec.name}.weight"], bias, spec.stride, spec.padding)


def layer_forward(spec: LayerSpec, tensors, x, mode: str, stats: Optional[dict] = None):
    """Run one layer; returns ``(y, cache)``. Train-mode BN statistics go into ``stats``."""
    cache = {}
    if spec.kind == "conv":
        y, cache["conv"] = nn.conv2d_forward(x, _conv_kernel(spec, tensors))
    elif spec.kind == "dwconv":
        y, cache["dw"] = nn.depthwise_conv2d_forward(
            x, nn.DepthwiseKernel(tensors[f"{spec.name}.weight"], spec.stride, spec.padding))
    elif spec.kind == "maxpool":
        return nn.maxpool2d_forward(x, spec.kernel, spec.stride, spec.ceil_mode)
    elif spec.kind == "avgpool":
        return nn.global_avgpool_forward(x)
    else:
        raise ValueError(f"unknown layer kind {spec.kind!r}")
    if spec.bn:
        y, cache["bn"], new = nn.batchnorm_forward(y, bn_params(tensors, spec.name), mode)
        if mode == "train" and stats is not None:
            stats[f"{spec.name}.bn.running_mean"] = new.running_mean
            stats[f"{spec.name}.bn.running_var"] = new.running_var
    if spec.relu:
        y, cache["relu"] = nn.relu_forward(y)
    return y, cache


def layer_backward(spec: LayerSpec, dy, cache, grads: dict):
    """Backprop one layer, accumulating parameter gradients into ``grads``."""
    if spec.kind == "maxpool":
        return nn.maxpool2d_backward(dy, cache)
    if spec.kind == "avgpool":
        return nn.global_avgpool_backward(dy, cache)
    if spec.relu:
        dy = nn.relu_backward(dy, cache["relu"])
    if spec.bn:
        dy, dgamma, dbeta = nn.batchnorm_backward(dy, cache["bn"])
        accumulate(grads, f"{spec.name}.bn.gamma", dgamma)
        accumulate(grads, f"{spec.name}.bn.beta", dbeta)
    if spec.kind == "conv":
        dx, dw, db = nn.conv2d_backward(dy, cache["conv"])
        if db is not None:
            accumulate(grads, f"{spec.name}.bias", db)
    else:
        dx, dw = nn.depthwise_conv2d_backward(dy, cache["dw"])
    accumulate(grads, f"{spec.name}.weight", dw)
    return dx


def accumulate(grads: dict, name: str, g: np.ndarray):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


@dataclass
class SequentialTrace:
    specs: List[LayerSpec]
    caches: list = field(default_factory=list)


def run_sequential(specs: Sequence[LayerSpec], tensors, x, mode="infer",
                   keep: Iterable[str] = (), stats: Optional[dict] = None):
    """Forward through ``specs`` in order.

    Returns ``(y, kept, trace)`` where ``kept`` maps layer names in ``keep``
    to their outputs.
    """
    keep = set(keep)
    kept = {}
    trace = SequentialTrace(list(specs))
    for spec in specs:
        x, cache = layer_forward(spec, tensors, x, mode, stats)
        trace.caches.append(cache)
        if spec.name in keep:
            kept[spec.name] = x
    return x, kept, trace


def backprop_sequential(trace: SequentialTrace, dy, grads: dict,
                        extra: Optional[Dict[str, np.ndarray]] = None):
    """Reverse of ``run_sequential``. ``extra`` adds gradients arriving at named layer outputs."""
    extra = extra or {}
    for spec, cache in zip(reversed(trace.specs), reversed(trace.caches)):
        if spec.name in extra:
            dy = extra[spec.name] if dy is None else dy + extra[spec.name]
        if dy is None:
            continue
        dy = layer_backward(spec, dy, cache, grads)
    return dy


@dataclass
class LayerParams:
    """Named parameter bundle plus the configuration that produced it."""

    config: object
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def copy(self) -> "LayerParams":
        return LayerParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))
