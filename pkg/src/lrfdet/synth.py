"""Deterministic synthetic freight-part scenes.

Each scene shows one part assembled from a body and a few sub-parts on a
striped, noisy background. A faulty part has one sub-part missing or
displaced. The six templates stand in for six inspection datasets and span
small to large parts so the default anchors cover all of them.

Every random quantity is drawn in a fixed order whether or not the part is
faulty, so a fault scene differs from its normal twin only inside the
faulted sub-part's footprint.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

Box = Tuple[float, float, float, float]
FAULT_MODES = ("missing", "displaced")
ANNOTATIONS_FILE = "annotations.jsonl"


@dataclass(frozen=True)
class SubPart:
    shape: str  # "rect" or "circle"
    box: Box  # relative to the part box, in [0, 1]
    color: Tuple[float, float, float]
    displaced: Box  # where the sub-part sits when displaced


@dataclass(frozen=True)
class PartTemplate:
    name: str
    size: Tuple[int, int]  # range of the longer side, pixels
    aspect: float  # width / height
    body_color: Tuple[float, float, float]
    subparts: Tuple[SubPart, ...]

    def extent(self, long_side: float) -> Tuple[int, int]:
        if self.aspect >= 1:
            return int(round(long_side)), int(round(long_side / self.aspect))
        return int(round(long_side * self.aspect)), int(round(long_side))


RED, YELLOW, CYAN, WHITE = (0.85, 0.2, 0.15), (0.95, 0.85, 0.2), (0.2, 0.8, 0.9), (0.95, 0.95, 0.95)

TEMPLATES: Tuple[PartTemplate, ...] = (
    PartTemplate("angle_cock", (88, 120), 2.0, (0.35, 0.35, 0.4), (
        SubPart("rect", (0.05, 0.1, 0.55, 0.45), RED, (0.45, 0.55, 0.95, 0.9)),
        SubPart("circle", (0.65, 0.2, 0.9, 0.8), WHITE, (0.1, 0.2, 0.35, 0.8)))),
    PartTemplate("bogie_block_key", (36, 48), 1.0, (0.3, 0.25, 0.2), (
        SubPart("rect", (0.2, 0.3, 0.8, 0.7), YELLOW, (0.5, 0.0, 1.0, 0.4)),)),
    PartTemplate("brake_shoe_key", (48, 64), 0.5, (0.4, 0.3, 0.25), (
        SubPart("rect", (0.15, 0.1, 0.85, 0.5), CYAN, (0.15, 0.55, 0.85, 0.95)),)),
    PartTemplate("cut_out_cock", (64, 88), 1.0, (0.3, 0.4, 0.3), (
        SubPart("rect", (0.1, 0.4, 0.9, 0.6), RED, (0.4, 0.1, 0.6, 0.9)),
        SubPart("circle", (0.35, 0.35, 0.65, 0.65), WHITE, (0.05, 0.05, 0.35, 0.35)))),
    PartTemplate("dust_collector", (96, 128), 1.0, (0.45, 0.45, 0.5), (
        SubPart("circle", (0.25, 0.25, 0.75, 0.75), YELLOW, (0.5, 0.5, 1.0, 1.0)),
        SubPart("rect", (0.4, 0.0, 0.6, 0.2), CYAN, (0.8, 0.1, 1.0, 0.3)))),
    PartTemplate("fastening_bolt", (48, 72), 1.0, (0.25, 0.3, 0.35), (
        SubPart("circle", (0.1, 0.1, 0.45, 0.45), WHITE, (0.55, 0.55, 0.9, 0.9)),
        SubPart("circle", (0.55, 0.1, 0.9, 0.45), RED, (0.1, 0.55, 0.45, 0.9)))),
)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 256
    templates: Tuple[PartTemplate, ...] = TEMPLATES
    fault_probability: float = 0.5
    fault_modes: Tuple[str, ...] = FAULT_MODES
    background_level: Tuple[float, float] = (0.35, 0.6)
    stripe_contrast: float = 0.08
    illumination: Tuple[float, float] = (0.8, 1.2)
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not self.templates:
            raise ValueError("at least one part template is required")
        for t in self.templates:
            w, h = t.extent(t.size[1])
            if w > self.width or h > self.height:
                raise ValueError(f"template {t.name} ({w}x{h}) is larger than the {self.width}x{self.height} image")
        if not 0 <= self.fault_probability <= 1:
            raise ValueError("fault_probability must lie in [0, 1]")
        unknown = set(self.fault_modes) - set(FAULT_MODES)
        if unknown or not self.fault_modes:
            raise ValueError(f"fault modes must be a non-empty subset of {FAULT_MODES}")
        if not 0 < self.illumination[0] <= self.illumination[1]:
            raise ValueError("illumination range must be positive and ordered")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(t.name for t in self.templates)


@dataclass(frozen=True)
class SceneObject:
    cls: str
    box: Box
    fault: bool

    def to_json(self) -> dict:
        return {"cls": self.cls, "box": [float(v) for v in self.box], "fault": self.fault}


@dataclass(frozen=True)
class Annotation:
    id: str
    w: int
    h: int
    objects: Tuple[SceneObject, ...]

    @property
    def has_fault(self) -> bool:
        return any(o.fault for o in self.objects)

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "w": self.w, "h": self.h,
                           "objects": [o.to_json() for o in self.objects]})

    @classmethod
    def from_json(cls, text: str, class_names: Optional[Sequence[str]] = None) -> "Annotation":
        d = json.loads(text)
        if not isinstance(d, dict) or not {"id", "w", "h", "objects"} <= d.keys():
            raise ValueError("annotation needs keys id, w, h, objects")
        objects = []
        for o in d["objects"]:
            box = tuple(float(v) for v in o["box"])
            if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
                raise ValueError(f"invalid box {o['box']}")
            if not (0 <= box[0] and 0 <= box[1] and box[2] <= d["w"] and box[3] <= d["h"]):
                raise ValueError(f"box {o['box']} lies outside the {d['w']}x{d['h']} image")
            if class_names is not None and o["cls"] not in class_names:
                raise ValueError(f"unknown class {o['cls']!r}")
            if not isinstance(o["fault"], bool):
                raise ValueError("fault flag must be a boolean")
            objects.append(SceneObject(str(o["cls"]), box, o["fault"]))
        return cls(str(d["id"]), int(d["w"]), int(d["h"]), tuple(objects))


@dataclass(frozen=True)
class SceneLayout:
    """Geometry of a scene; ``fault_region`` covers every pixel a fault can change."""

    template: PartTemplate
    part_box: Box
    fault: bool
    faulted_subpart: int
    mode: str
    fault_region: Box


def scene_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([spec.seed, index]))


def _abs_box(part: Box, rel: Box) -> Box:
    x1, y1, x2, y2 = part
    w, h = x2 - x1, y2 - y1
    return (x1 + rel[0] * w, y1 + rel[1] * h, x1 + rel[2] * w, y1 + rel[3] * h)


def _mask(shape: str, box: Box, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    x1, y1, x2, y2 = box
    if shape == "rect":
        return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    cx, cy, rx, ry = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2, (y2 - y1) / 2
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _union(a: Box, b: Box) -> Box:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def augment_illumination(image: np.ndarray, alpha: float) -> np.ndarray:
    """Brightness scaling ``clip(alpha * x, 0, 1)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    image = np.asarray(image)
    return np.clip(image * alpha, 0.0, 1.0).astype(image.dtype, copy=False)


def generate_scene(spec: SceneSpec, index: int, fault: Optional[bool] = None):
    """Render scene ``index``. Returns ``(image (3, H, W) float32 in [0, 1], Annotation)``.

    ``fault`` forces the fault state while keeping every other random draw,
    which yields the normal (or faulty) twin of a scene.
    """
    image, annotation, _ = render_scene(spec, index, fault)
    return image, annotation


def scene_layout(spec: SceneSpec, index: int, fault: Optional[bool] = None) -> SceneLayout:
    return render_scene(spec, index, fault)[2]


def render_scene(spec: SceneSpec, index: int, fault: Optional[bool] = None):
    rng = scene_rng(spec, index)
    H, W = spec.height, spec.width
    template = spec.templates[index % len(spec.templates)]

    # fixed draw order: background, part geometry, colours, fault, illumination, noise
    level = rng.uniform(*spec.background_level)
    tint = rng.uniform(-0.03, 0.03, size=3)
    period = rng.uniform(12.0, 40.0)
    phase = rng.uniform(0, 2 * np.pi)
    vertical = rng.random() < 0.5
    long_side = rng.uniform(*template.size)
    pw, ph = template.extent(long_side)
    x1 = int(rng.integers(0, W - pw + 1))
    y1 = int(rng.integers(0, H - ph + 1))
    body_jitter = rng.uniform(-0.05, 0.05, size=3)
    sub_jitter = rng.uniform(-0.05, 0.05, size=(len(template.subparts), 3))
    is_fault = rng.random() < spec.fault_probability
    which = int(rng.integers(len(template.subparts)))
    mode = spec.fault_modes[int(rng.integers(len(spec.fault_modes)))]
    alpha = rng.uniform(*spec.illumination)
    noise = rng.standard_normal((3, H, W)) * spec.noise
    if fault is not None:
        is_fault = fault

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    coord = xx if vertical else yy
    stripes = spec.stripe_contrast * np.sin(2 * np.pi * coord / period + phase)
    img = (level + tint)[:, None, None] + stripes[None]

    part: Box = (float(x1), float(y1), float(x1 + pw), float(y1 + ph))
    body = _mask("rect", part, yy, xx)
    img[:, body] = (np.asarray(template.body_color) + body_jitter)[:, None]
    for i, sub in enumerate(template.subparts):
        if is_fault and i == which:
            if mode == "missing":
                continue
            box = _abs_box(part, sub.displaced)
        else:
            box = _abs_box(part, sub.box)
        img[:, _mask(sub.shape, box, yy, xx)] = (np.asarray(sub.color) + sub_jitter[i])[:, None]

    sub = template.subparts[which]
    region = _abs_box(part, sub.box)
    if mode == "displaced":
        region = _union(region, _abs_box(part, sub.displaced))
    img = np.clip(augment_illumination(np.clip(img, 0, 1), alpha) + noise, 0, 1).astype(np.float32)
    annotation = Annotation(f"{index:06d}", W, H, (SceneObject(template.name, part, bool(is_fault)),))
    return img, annotation, SceneLayout(template, part, bool(is_fault), which, mode, region)


class SyntheticCorpus:
    """Lazily rendered scenes ``start .. start + count - 1`` as a sequence of samples."""

    def __init__(self, spec: SceneSpec, count: int, start: int = 0):
        if count < 0:
            raise ValueError("count must be non-negative")
        self.spec, self.count, self.start = spec, count, start

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int):
        if not -self.count <= i < self.count:
            raise IndexError(i)
        return generate_scene(self.spec, self.start + (i % self.count))

    def annotations(self) -> List[Annotation]:
        return [self[i][1] for i in range(self.count)]


# --------------------------------------------------------------------------
# files


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """Binary P6 from a ``(3, H, W)`` float image in [0, 1]."""
    data = to_uint8(image).transpose(1, 2, 0)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def _header_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """P6 -> ``(3, H, W)`` float32, P5 -> ``(1, H, W)``, both scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _header_tokens(raw, 4)
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit P5/P6 files are supported")
    w, h = int(w), int(h)
    data = np.frombuffer(raw, np.uint8, count=w * h * channels, offset=offset)
    return (data.reshape(h, w, channels).transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


read_ppm = read_pnm


def write_pgm(path, gray: np.ndarray):
    """Binary P5 from a ``(H, W)`` uint8 array."""
    gray = np.asarray(gray, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        f.write(np.ascontiguousarray(gray).tobytes())


def write_dataset(spec: SceneSpec, count: int, directory, start: int = 0) -> List[Annotation]:
    """Render ``count`` scenes into ``directory`` as ``<id>.ppm`` plus one annotation file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    annotations = []
    with open(directory / ANNOTATIONS_FILE, "w") as f:
        for index in range(start, start + count):
            image, ann = generate_scene(spec, index)
            write_ppm(directory / f"{ann.id}.ppm", image)
            f.write(ann.to_json() + "\n")
            annotations.append(ann)
    return annotations


def read_annotations(path, class_names: Optional[Sequence[str]] = None) -> List[Annotation]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(Annotation.from_json(line, class_names))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed annotation: {e}") from None
    return out


class DiskDataset:
    """Samples ``(image, Annotation)`` from a directory; images load on access."""

    def __init__(self, directory, class_names: Optional[Sequence[str]] = None):
        self.directory = Path(directory)
        path = self.directory / ANNOTATIONS_FILE
        self.annotations = read_annotations(path, class_names) if path.exists() else []

    def __len__(self) -> int:
        return len(self.annotations)

    def __getitem__(self, i: int):
        ann = self.annotations[i]
        return read_pnm(self.directory / f"{ann.id}.ppm"), ann

    def __iter__(self) -> Iterator:
        return (self[i] for i in range(len(self)))


def read_dataset(directory, class_names: Optional[Sequence[str]] = None) -> DiskDataset:
    return DiskDataset(directory, class_names)


def letterbox(image: np.ndarray, multiple: int = 16, fill: float = 0.0) -> np.ndarray:
    """Pad bottom and right up to the next multiple; box coordinates are unchanged."""
    c, h, w = image.shape
    H, W = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    if (H, W) == (h, w):
        return image
    out = np.full((c, H, W), fill, dtype=image.dtype)
    out[:, :h, :w] = image
    return out
