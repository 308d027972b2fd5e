"""Joint end-to-end training: one image per iteration, RPN and RoI losses
summed with unit weights, SGD with momentum and a step learning rate.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import mlps
from .backbone import rfdnet_layers
from .boxes import encode_boxes, iou_matrix
from .checkpoint import load_checkpoint, save_checkpoint
from .detector import DetectorConfig, anchors_for, build_detector, shared_taps
from .fusion import mff_backward, mff_forward
from .layers import LayerParams, backprop_sequential, init_tensors, is_weight
from .rpn import assign_anchor_targets, propose, rpn_heads_backward, rpn_heads_forward, rpn_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "lr", "rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "total")
DIVERGENCE_LIMIT = 1e4


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 40000
    total_iters: int = 70000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    rpn_batch: int = 256
    roi_batch: int = 512
    rpn_fg_fraction: float = 0.5
    roi_fg_fraction: float = 0.25
    flip: bool = False
    images_per_iter: int = 1  # gradients are averaged over the images of one step
    seed: int = 0

    def __post_init__(self):
        for name in ("base_lr", "lr_decay_factor", "lr_decay_every", "rpn_batch", "roi_batch", "images_per_iter"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_iters < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("total_iters, momentum and weight_decay must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU preset for 256x256 scenes: 2000 iterations of 4 images, decay every 1000.

        Minibatch caps shrink with the anchor count of a 16x16 feature map.
        """
        base = cls(base_lr=0.1, total_iters=2000, lr_decay_every=1000, rpn_batch=32, roi_batch=64,
                   images_per_iter=4, flip=True, seed=7)
        return replace(base, **overrides)

    def with_total_iters(self, total: int) -> "TrainConfig":
        """Override the iteration budget, scaling the decay interval proportionally."""
        every = max(1, round(self.lr_decay_every * total / self.total_iters)) if self.total_iters else self.lr_decay_every
        return replace(self, total_iters=total, lr_decay_every=every)

    def lr_at(self, iteration: int) -> float:
        return self.base_lr * self.lr_decay_factor ** (iteration // self.lr_decay_every)


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# initialization


def init_weights(params: LayerParams, pretrained: Optional[Dict[str, np.ndarray]] = None,
                 seed: int = 0) -> LayerParams:
    """Fresh Gaussian(0, 0.01) parameters; the backbone is copied from
    ``pretrained`` when given (every backbone name must be present)."""
    config = params.config
    fresh = build_detector(config, seed) if isinstance(config, DetectorConfig) else None
    tensors = dict(fresh.tensors) if fresh is not None else init_tensors(
        rfdnet_layers(config), np.random.Generator(np.random.PCG64(seed)))
    if pretrained is not None:
        backbone = config.backbone if isinstance(config, DetectorConfig) else config
        names = [n for s in rfdnet_layers(replace(backbone, detection_mode=True))
                 for n in s.param_shapes()]
        missing = [n for n in names if n not in pretrained]
        if missing:
            raise ValueError(f"pretrained checkpoint lacks backbone entries: {missing}")
        for n in names:
            if pretrained[n].shape != tensors[n].shape:
                raise ValueError(f"pretrained {n} has shape {pretrained[n].shape}, expected {tensors[n].shape}")
            tensors[n] = pretrained[n].astype(tensors[n].dtype)
    return LayerParams(config, tensors)


# --------------------------------------------------------------------------
# sampling and targets


def sample_indices(labels: np.ndarray, batch: int, fg_fraction: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Up to ``batch * fg_fraction`` positives, the rest filled with negatives."""
    fg = np.flatnonzero(labels > 0)
    bg = np.flatnonzero(labels == 0)
    n_fg = min(len(fg), int(batch * fg_fraction))
    fg = rng.permutation(fg)[:n_fg]
    bg = rng.permutation(bg)[:min(len(bg), batch - n_fg)]
    return np.concatenate([fg, bg]).astype(np.int64)


def sample_minibatch(rpn_labels: np.ndarray, roi_labels: np.ndarray, rng: np.random.Generator,
                     config: TrainConfig = TrainConfig()):
    """Anchor sample (1:1 target ratio, cap ``rpn_batch``) and RoI sample (1:3, cap ``roi_batch``)."""
    return (sample_indices(rpn_labels, config.rpn_batch, config.rpn_fg_fraction, rng),
            sample_indices(roi_labels, config.roi_batch, config.roi_fg_fraction, rng))


def assign_roi_targets(rois: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                       fg_iou: float = 0.5):
    """Class label of the best-overlap ground truth when IoU >= ``fg_iou``, else 0."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(rois), np.int64)
    targets = np.zeros((len(rois), 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0 or len(rois) == 0:
        return labels, targets
    ious = iou_matrix(rois, gt_boxes)
    best = ious.argmax(axis=1)
    fg = ious[np.arange(len(rois)), best] >= fg_iou
    labels[fg] = np.asarray(gt_labels)[best[fg]]
    targets[fg] = encode_boxes(rois[fg], gt_boxes[best[fg]])
    return labels, targets


# --------------------------------------------------------------------------
# one step


@dataclass
class StepResult:
    losses: Dict[str, float]
    grads: Dict[str, np.ndarray]
    stats: Dict[str, np.ndarray]


def train_step(params: LayerParams, image: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
               rng: np.random.Generator, config: TrainConfig = TrainConfig(),
               rois: Optional[np.ndarray] = None) -> StepResult:
    """Forward and backward through the whole detector for one image.

    Proposals are constants of the RoI loss (no gradient flows through box
    decoding); pass ``rois`` to fix them instead of running the RPN decoder.
    """
    det: DetectorConfig = params.config
    tensors = params.tensors
    h, w = image.shape[2:]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    stats: Dict[str, np.ndarray] = {}
    grads: Dict[str, np.ndarray] = {}

    taps, bb_trace = shared_taps(params, image, "train", stats)
    block1, block2 = det.mff1(), det.mff2()
    f1, c1 = mff_forward(taps, tensors, block1, "train", stats)
    obj, deltas, head_cache = rpn_heads_forward(f1, tensors, det.num_anchors)
    grid = anchors_for(det, *f1.shape[2:])
    targets = assign_anchor_targets(grid.anchors, gt_boxes, det.rpn_fg_iou, det.rpn_bg_iou, (h, w))
    rpn_idx = sample_indices(targets.labels, config.rpn_batch, config.rpn_fg_fraction, rng)
    rpn_terms, dobj, ddeltas = rpn_loss(obj, deltas, targets, rpn_idx, det.lam)

    if rois is None:
        rois, _ = propose(obj, deltas, grid.anchors, (h, w), det.train_pre_nms, det.rpn_nms_iou,
                          det.train_post_nms)
    rois = np.concatenate([np.asarray(rois, dtype=np.float64).reshape(-1, 4), gt_boxes])
    roi_labels, roi_targets = assign_roi_targets(rois, gt_boxes, gt_labels, det.roi_fg_iou)
    roi_idx = sample_indices(roi_labels, config.roi_batch, config.roi_fg_fraction, rng)

    f2, c2 = mff_forward(taps, tensors, block2, "train", stats)
    banks, bank_cache = mlps.ps_banks_forward(f2, tensors, det.k)
    stride = det.feature_stride
    sel = rois[roi_idx]
    pc, pc_cache = mlps.psroi_pool_forward(banks.cls_maps[0], sel, det.k, det.num_classes, stride)
    pr, pr_cache = mlps.psroi_pool_forward(banks.reg_maps[0], sel, det.k, 4, stride)
    roi_terms, dpc, dpr = mlps.roi_loss(pc, pr, roi_labels[roi_idx], roi_targets[roi_idx],
                                        det.lam, det.average_vote)
    dtype = banks.cls_maps.dtype
    dcls = mlps.psroi_pool_backward(dpc, pc_cache)[None].astype(dtype)
    dreg = mlps.psroi_pool_backward(dpr, pr_cache)[None].astype(dtype)

    df2 = mlps.ps_banks_backward(dcls, dreg, bank_cache, grads)
    dt2 = mff_backward(df2, c2, block2, grads)
    df1 = rpn_heads_backward(dobj, ddeltas, head_cache, grads)
    dt1 = mff_backward(df1, c1, block1, grads)
    backprop_sequential(bb_trace, None, grads, {f"{t}.pointwise": dt1[t] + dt2[t] for t in taps})

    losses = {"rpn_cls": rpn_terms.cls, "rpn_reg": rpn_terms.reg,
              "roi_cls": roi_terms.cls, "roi_reg": roi_terms.reg}
    losses["total"] = sum(losses.values())
    return StepResult(losses, grads, stats)


def trainable(name: str) -> bool:
    return "running_" not in name


def sgd_step(tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             velocity: Dict[str, np.ndarray], config: TrainConfig, iteration: int):
    """Momentum SGD: ``v = mu v + g + wd p`` (wd on conv weights only); ``p -= lr v``.

    Returns new ``(tensors, velocity)`` dicts; the inputs are not modified.
    """
    lr = config.lr_at(iteration)
    new_t, new_v = dict(tensors), dict(velocity)
    for name, p in tensors.items():
        if not trainable(name):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        g = g.astype(p.dtype, copy=False)
        if config.weight_decay and is_weight(name):
            g = g + p.dtype.type(config.weight_decay) * p
        v = velocity.get(name)
        v = g if v is None else p.dtype.type(config.momentum) * v + g
        new_v[name] = v
        new_t[name] = p - p.dtype.type(lr) * v
    return new_t, new_v


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    params: LayerParams
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    log: List[dict] = field(default_factory=list)


VELOCITY_PREFIX = "sgd.velocity."
ITER_ENTRY = "sgd.iteration"


def save_state(path, state: TrainState, train_config: Optional[TrainConfig] = None):
    """Checkpoint with parameters, momentum buffers and the iteration counter."""
    tensors = dict(state.params.tensors)
    tensors.update({VELOCITY_PREFIX + k: v for k, v in state.velocity.items()})
    tensors[ITER_ENTRY] = np.array([state.iteration], np.float32)
    meta = {"detector": state.params.config.to_dict()}
    if train_config is not None:
        meta["train"] = asdict(train_config)
    save_checkpoint(path, tensors, meta)


def load_state(path) -> TrainState:
    tensors, meta = load_checkpoint(path)
    if not meta or "detector" not in meta:
        raise ValueError(f"{path}: checkpoint carries no detector configuration")
    config = DetectorConfig.from_dict(meta["detector"])
    velocity = {k[len(VELOCITY_PREFIX):]: tensors.pop(k) for k in list(tensors) if k.startswith(VELOCITY_PREFIX)}
    iteration = int(tensors.pop(ITER_ENTRY)[0]) if ITER_ENTRY in tensors else 0
    return TrainState(LayerParams(config, tensors), velocity, iteration)


def load_params(path) -> LayerParams:
    return load_state(path).params


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64([seed, 0xDA7A, epoch])).permutation(n)


def class_index(config: DetectorConfig, obj) -> int:
    name = "fault" if obj.fault else "part"
    if name in config.classes:
        return config.classes.index(name) + 1
    return config.classes.index(obj.cls) + 1


def ground_truth(config: DetectorConfig, annotation):
    boxes = np.array([o.box for o in annotation.objects], dtype=np.float64).reshape(-1, 4)
    labels = np.array([class_index(config, o) for o in annotation.objects], dtype=np.int64)
    return boxes, labels


def hflip(image: np.ndarray, boxes: np.ndarray):
    w = image.shape[-1]
    flipped = boxes.copy()
    flipped[:, 0], flipped[:, 2] = w - boxes[:, 2], w - boxes[:, 0]
    return np.ascontiguousarray(image[..., ::-1]), flipped


def train(dataset: Sequence, config: TrainConfig, detector_config: Optional[DetectorConfig] = None,
          state: Optional[TrainState] = None, log_path=None, stop_at: Optional[int] = None) -> TrainState:
    """Train on ``dataset``, a sequence of ``(image (3, H, W), Annotation)``.

    Deterministic for a fixed ``config.seed``: the image order comes from a
    seeded per-epoch permutation and each iteration draws its own generator.
    Resuming from ``state`` continues the identical trajectory.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if state is None:
        state = TrainState(build_detector(detector_config or DetectorConfig.desk(), config.seed))
    params, velocity = state.params, dict(state.velocity)
    det = params.config
    history = list(state.log)
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    n, per = len(dataset), config.images_per_iter
    for it in range(state.iteration, end):
        rng = np.random.Generator(np.random.PCG64([config.seed, it]))
        losses: Dict[str, float] = {}
        grads: Dict[str, np.ndarray] = {}
        stats: Dict[str, np.ndarray] = {}
        for j in range(per):
            sample = it * per + j
            image, annotation = dataset[epoch_order(n, config.seed, sample // n)[sample % n]]
            image = np.asarray(image, dtype=np.float32)[None]
            boxes, labels = ground_truth(det, annotation)
            if config.flip and rng.random() < 0.5:
                image, boxes = hflip(image, boxes)
            # running statistics advance image by image; weights stay fixed within the step
            step = train_step(LayerParams(det, {**params.tensors, **stats}), image, boxes, labels, rng, config)
            stats.update(step.stats)
            for k, v in step.losses.items():
                losses[k] = losses.get(k, 0.0) + v / per
            for k, g in step.grads.items():
                grads[k] = g / per if k not in grads else grads[k] + g / per
        total = losses["total"]
        if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"iteration {it}: loss {total} ({losses}); lr {config.lr_at(it)}")
        tensors, velocity = sgd_step(params.tensors, grads, velocity, config, it)
        tensors.update(stats)
        params = LayerParams(det, tensors)
        row = {"iter": it, "lr": config.lr_at(it), **losses}
        history.append(row)
        if it % 100 == 0:
            log.info("iter %d lr %.2g loss %.4f", it, row["lr"], total)
    state = TrainState(params, velocity, max(end, state.iteration), history)
    if log_path is not None:
        write_loss_log(log_path, history)
    return state


def write_loss_log(path, rows: Iterable[dict]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r["iter"], repr(r["lr"])] + [repr(float(r[k])) for k in LOG_FIELDS[2:]])


def read_loss_log(path) -> List[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]
