"""Losses, RoI labeling, hard-example mining, SGD, and the training loop.

A training step scores a fixed number of proposals per image, keeps the
hardest ones by total loss, and averages classification plus gated box
regression loss over the kept set.  Background proposals contribute no
regression loss.  Everything is deterministic given the seed: proposal
jitter, batch sampling, and initialization all draw from derived
sub-streams, so the same seed reproduces the same checkpoint bit for
bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import CHANNELS, backbone_forward, build_backbone
from .errors import ConfigError, NumericError
from .geometry import Box, RegressionTarget, clip_box, encode_box, iou
from .head import BanConfig, build_head, head_forward_graph
from .rng import XorShift64Star, derive_seed
from .tensor import (
    Tensor,
    add,
    add_n,
    gather_rows,
    scale,
    smooth_l1_rows,
    softmax_cross_entropy,
    sum_all,
)


@dataclass
class LabeledRoi:
    """A proposal with its assigned class and, for positives, offsets.

    label 0 is background; `target` is meaningful only when label > 0.
    `loss` is filled during the mining pass.
    """

    box: Box
    label: int
    target: "RegressionTarget | None" = None
    loss: float = 0.0


@dataclass(frozen=True)
class SgdConfig:
    """Optimizer and loop settings.

    `schedule` lists (iteration, lr) steps; the learning rate at
    iteration i is the value of the latest step at or before i, or `lr`
    if none applies yet.
    """

    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = ((1400, 1e-4),)
    iterations: int = 2000
    images_per_batch: int = 2
    rois_per_image: int = 300
    ohem_keep: int = 128

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum, and weight_decay must be >= 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.images_per_batch < 1 or self.rois_per_image < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 1 <= self.ohem_keep <= self.rois_per_image:
            raise ConfigError("ohem_keep must be in [1, rois_per_image]")
        object.__setattr__(self, "schedule", tuple(self.schedule))


def learning_rate_at(cfg: SgdConfig, iteration: int) -> float:
    lr = cfg.lr
    for start, value in sorted(cfg.schedule):
        if iteration >= start:
            lr = value
    return lr


def cross_entropy(scores, label: int) -> float:
    """-log softmax(scores)[label] for one proposal's score vector."""
    t = scores if isinstance(scores, Tensor) else Tensor(scores)
    row = t.data.reshape(1, -1)
    return softmax_cross_entropy(Tensor(row), [int(label)]).item()


def smooth_l1(t: RegressionTarget, v: RegressionTarget) -> float:
    """Sum of per-coordinate smooth-L1 distances between two encodings."""
    total = 0.0
    for a, b in zip(t.as_array(), v.as_array()):
        x = abs(a - b)
        total += 0.5 * x * x if x < 1.0 else x - 0.5
    return total


def assign_labels(proposals, gts, fg_threshold: float = 0.5) -> list[LabeledRoi]:
    """Give each proposal the class of its best ground truth, if any.

    A proposal takes the class of its maximum-IoU ground truth when that
    IoU reaches `fg_threshold`, else background.  IoU ties go to the
    lower ground-truth index.  Positive proposals carry offsets encoding
    their ground truth against the proposal box.
    """
    out = []
    for p in proposals:
        best_iou = 0.0
        best = None
        for cls_id, gt in gts:
            v = iou(p, gt)
            if v > best_iou:
                best_iou = v
                best = (cls_id, gt)
        if best is not None and best_iou >= fg_threshold:
            out.append(LabeledRoi(p, int(best[0]), encode_box(best[1], p)))
        else:
            out.append(LabeledRoi(p, 0))
    return out


def ohem_select(rois, keep: int) -> list[int]:
    """Indices of the `keep` largest-loss RoIs, ascending.

    Ties break toward the lower index, so selection is stable under
    permutation when losses are distinct.
    """
    if not 0 < keep <= len(rois):
        raise ConfigError(f"keep={keep} outside [1, {len(rois)}]")
    order = sorted(range(len(rois)), key=lambda i: (-rois[i].loss, i))
    return sorted(order[:keep])


def sgd_step(params, grads, state, cfg: SgdConfig, lr: "float | None" = None):
    """One momentum-SGD update, in place.

    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    Missing velocities start at zero.  Non-finite gradients abort.
    """
    if lr is None:
        lr = cfg.lr
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = cfg.momentum * v + g + cfg.weight_decay * p.data
        state[name] = v
        p.data -= lr * v
    return params, state


def propose(
    gts,
    image_size,
    n: int,
    rng_seed: int,
    center_jitter: float = 0.25,
    scale_jitter: float = 0.3,
) -> list[Box]:
    """Deterministic stand-in for a proposal network.

    A real proposal stage concentrates boxes on objects, so half the
    budget goes to the ground-truth boxes plus jittered copies of them
    (uniform center shift up to `center_jitter` of the box size,
    log-scale factor up to `scale_jitter`); uniform random boxes fill
    the remainder up to exactly n.  Everything is clipped to the image.
    """
    if n <= 0:
        raise ConfigError("propose needs n > 0")
    width, height = float(image_size[0]), float(image_size[1])
    gen = XorShift64Star(rng_seed)
    kept = []
    if gts:
        n_object = min(n, max(len(gts), n // 2))
        kept.extend(clip_box(b, width, height) for b in gts[:n_object])
        while len(kept) < n_object:
            for b in gts:
                dx = gen.uniform(-center_jitter, center_jitter) * b.w
                dy = gen.uniform(-center_jitter, center_jitter) * b.h
                sw = math.exp(gen.uniform(-scale_jitter, scale_jitter))
                sh = math.exp(gen.uniform(-scale_jitter, scale_jitter))
                jittered = Box(b.cx + dx, b.cy + dy, b.w * sw, b.h * sh)
                kept.append(clip_box(jittered, width, height))
                if len(kept) >= n_object:
                    break
    while len(kept) < n:
        w = gen.uniform(8.0, max(9.0, width / 2))
        h = gen.uniform(8.0, max(9.0, height / 2))
        cx = gen.uniform(0.0, width)
        cy = gen.uniform(0.0, height)
        kept.append(clip_box(Box(cx, cy, w, h), width, height))
    return kept


def build_model(config: BanConfig, rng_seed: int):
    """Backbone plus head parameters in one name-keyed mapping."""
    params = build_backbone(rng_seed)
    params.update(build_head(config, rng_seed, in_channels=CHANNELS[-1]))
    return params


@dataclass
class LossRow:
    iteration: int
    loss_cls: float
    loss_reg: float
    loss_total: float
    lr: float


@dataclass
class TrainResult:
    params: dict
    loss_rows: list


def _regression_rows(rois, dims: int):
    targets = np.zeros((len(rois), dims))
    weights = np.zeros(len(rois))
    for i, r in enumerate(rois):
        if r.label > 0:
            targets[i] = r.target.as_array()
            weights[i] = 1.0
    return targets, weights


def batch_losses(params, config: BanConfig, records, rois_per_record, kept_per_record):
    """Loss tensors for a frozen micro-batch.

    `records` supply features input arrays; `rois_per_record` the
    labeled proposals; `kept_per_record` the mined indices.  Returns
    (loss_cls, loss_reg, loss_total) tensors averaged over all kept
    RoIs, with gradients flowing only through the kept rows.
    """
    cls_terms = []
    reg_terms = []
    n_kept = 0
    for rec, rois, kept in zip(records, rois_per_record, kept_per_record):
        feats = backbone_forward(params, Tensor(rec.as_input()))
        graph = head_forward_graph(params, feats, [r.box for r in rois], config)
        labels = [r.label for r in rois]
        targets, weights = _regression_rows(rois, config.regression_dims)
        cls_vec = softmax_cross_entropy(graph.class_scores, labels)
        reg_vec = smooth_l1_rows(graph.box_deltas, targets, weights)
        cls_terms.append(sum_all(gather_rows(cls_vec, kept)))
        reg_terms.append(sum_all(gather_rows(reg_vec, kept)))
        n_kept += len(kept)
    if n_kept == 0:
        raise ConfigError("no RoIs kept in the batch")
    loss_cls = scale(add_n(cls_terms), 1.0 / n_kept)
    loss_reg = scale(add_n(reg_terms), 1.0 / n_kept)
    return loss_cls, loss_reg, add(loss_cls, loss_reg)


def train(dataset, config: BanConfig, sgd: SgdConfig, rng_seed: int) -> TrainResult:
    """Run the full loop and return final parameters plus the loss log.

    Each iteration samples images, generates and labels proposals,
    scores them, keeps the `ohem_keep` hardest per image, and applies
    one SGD step on the mean kept loss.  A non-finite loss aborts with
    the iteration index.
    """
    if not dataset:
        raise ConfigError("train needs a non-empty dataset")
    if config.regression_dims != 4:
        raise ConfigError("training regresses 4 box offsets")
    params = build_model(config, rng_seed)
    state: dict = {}
    rows: list[LossRow] = []
    batch_gen = XorShift64Star(derive_seed(rng_seed, "batching"))
    for it in range(sgd.iterations):
        lr = learning_rate_at(sgd, it)
        cls_terms = []
        reg_terms = []
        n_kept = 0
        for b in range(sgd.images_per_batch):
            rec = dataset[batch_gen.randint(len(dataset))]
            proposals = propose(
                [box for _, box in rec.gts],
                (rec.width, rec.height),
                sgd.rois_per_image,
                derive_seed(rng_seed, "proposals", it, b),
            )
            rois = assign_labels(proposals, rec.gts)
            feats = backbone_forward(params, Tensor(rec.as_input()))
            graph = head_forward_graph(params, feats, proposals, config)
            labels = [r.label for r in rois]
            targets, weights = _regression_rows(rois, config.regression_dims)
            cls_vec = softmax_cross_entropy(graph.class_scores, labels)
            reg_vec = smooth_l1_rows(graph.box_deltas, targets, weights)
            per_roi = cls_vec.data + reg_vec.data
            for i, r in enumerate(rois):
                r.loss = float(per_roi[i])
            # mining gates the gradient: only kept rows are gathered
            kept = ohem_select(rois, sgd.ohem_keep)
            cls_terms.append(sum_all(gather_rows(cls_vec, kept)))
            reg_terms.append(sum_all(gather_rows(reg_vec, kept)))
            n_kept += len(kept)
        loss_cls = scale(add_n(cls_terms), 1.0 / n_kept)
        loss_reg = scale(add_n(reg_terms), 1.0 / n_kept)
        total = add(loss_cls, loss_reg)
        if not math.isfinite(total.item()):
            raise NumericError(f"training diverged at iteration {it}")
        total.backward()
        grads = {name: p.grad for name, p in params.items()}
        try:
            sgd_step(params, grads, state, sgd, lr)
        except NumericError as exc:
            raise NumericError(f"training diverged at iteration {it}: {exc}") from exc
        for p in params.values():
            p.grad = None
        rows.append(LossRow(it, loss_cls.item(), loss_reg.item(), total.item(), lr))
    return TrainResult(params=params, loss_rows=rows)


def write_loss_csv(path, rows) -> None:
    """Per-iteration log: iteration,loss_cls,loss_reg,loss_total,lr."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss_cls", "loss_reg", "loss_total", "lr"])
        for r in rows:
            writer.writerow(
                [r.iteration, repr(r.loss_cls), repr(r.loss_reg),
                 repr(r.loss_total), repr(r.lr)]
            )
