"""Detection evaluation: greedy matching, AP protocols, and inference.

Average precision is computed in exact rational arithmetic (precision
and recall are ratios of small integers) and converted to float only at
the end, so results are reproducible to the last bit and agree with a
brute-force reference on small instances.

Two AP protocols are provided: the 11-point interpolation used by the
2007 VOC toolkit, and the area under the max-interpolated
precision-recall curve; the COCO-style summary averages the area
protocol over IoU thresholds 0.50 to 0.95 in steps of 0.05.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .backbone import backbone_forward
from .errors import CheckpointError, ConfigError, GeometryError
from .geometry import Box, RegressionTarget, clip_box, decode_box, iou, nms
from .head import BanConfig, head_forward_graph, validate_head_params
from .rng import derive_seed
from .tensor import Tensor
from .training import propose


class Protocol(enum.Enum):
    VOC07 = "voc07"
    AREA = "area"


@dataclass(frozen=True)
class DetectionRecord:
    """One scored box emitted by the detector."""

    image_id: str
    class_id: int
    score: float
    box: Box

    def __post_init__(self):
        if self.class_id < 1:
            raise ConfigError(f"class_id must be >= 1, got {self.class_id}")


def dataset_ground_truth(records) -> dict:
    """Map image_id -> [(class_id, Box), ...] for loaded records."""
    return {rec.image_id: list(rec.gts) for rec in records}


def _ranked(dets, class_id):
    picked = [(i, d) for i, d in enumerate(dets) if d.class_id == class_id]
    picked.sort(key=lambda pair: (-pair[1].score, pair[0]))
    return [d for _, d in picked]


def _match_flags(dets, gts, class_id, iou_thresh):
    """True/false-positive flags in rank order, plus the positive count.

    A detection matches the highest-IoU not-yet-matched ground truth of
    its class in its image when that IoU reaches the threshold; repeats
    against an already matched ground truth count as false positives.
    """
    per_image = {}
    npos = 0
    for image_id, entries in gts.items():
        boxes = [b for cls, b in entries if cls == class_id]
        per_image[image_id] = [boxes, [False] * len(boxes)]
        npos += len(boxes)
    flags = []
    for det in _ranked(dets, class_id):
        boxes, used = per_image.get(det.image_id, ([], []))
        best_iou = 0.0
        best = -1
        for j, gt_box in enumerate(boxes):
            if used[j]:
                continue
            v = iou(det.box, gt_box)
            if v > best_iou:
                best_iou = v
                best = j
        if best >= 0 and best_iou >= iou_thresh:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, npos


def _pr_points(flags, npos):
    points = []
    tp = 0
    fp = 0
    for is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((Fraction(tp, npos), Fraction(tp, tp + fp)))
    return points


def average_precision(dets, gts, class_id, iou_thresh, protocol=Protocol.AREA):
    """AP of one class at one IoU threshold.

    `gts` maps image_id to (class_id, Box) pairs.  A class with no
    ground truth scores 0 here; the mAP helpers exclude such classes
    instead.
    """
    if not isinstance(protocol, Protocol):
        raise ConfigError(f"bad protocol {protocol!r}")
    flags, npos = _match_flags(dets, gts, class_id, iou_thresh)
    if npos == 0:
        return 0.0
    points = _pr_points(flags, npos)
    if protocol is Protocol.VOC07:
        total = Fraction(0)
        for step in range(11):
            level = Fraction(step, 10)
            best = Fraction(0)
            for recall, precision in points:
                if recall >= level and precision > best:
                    best = precision
            total += best
        return float(total / 11)
    # area protocol: sum rectangle slices under the running-max envelope
    recalls = [r for r, _ in points] + [Fraction(1)]
    precisions = [p for _, p in points] + [Fraction(0)]
    for i in range(len(precisions) - 2, -1, -1):
        if precisions[i] < precisions[i + 1]:
            precisions[i] = precisions[i + 1]
    area = Fraction(0)
    prev = Fraction(0)
    for recall, precision in zip(recalls, precisions):
        if recall > prev:
            area += (recall - prev) * precision
            prev = recall
    return float(area)


def _classes_with_gt(gts):
    present = set()
    for entries in gts.values():
        present.update(cls for cls, _ in entries)
    return sorted(present)


def map_voc(dets, gts, iou_thresh, protocol=Protocol.VOC07) -> float:
    """Unweighted class mean of AP at one threshold."""
    classes = _classes_with_gt(gts)
    if not classes:
        return 0.0
    total = sum(
        average_precision(dets, gts, c, iou_thresh, protocol) for c in classes
    )
    return total / len(classes)


COCO_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))


def map_coco_style(dets, gts) -> float:
    """Mean over IoU 0.50:0.05:0.95 of the class-mean area AP."""
    classes = _classes_with_gt(gts)
    if not classes:
        return 0.0
    total = 0.0
    for thresh in COCO_THRESHOLDS:
        total += sum(
            average_precision(dets, gts, c, thresh, Protocol.AREA) for c in classes
        ) / len(classes)
    return total / len(COCO_THRESHOLDS)


@dataclass
class EvalReport:
    """Headline metrics plus per-class AP at IoU 0.5."""

    map50: float
    map70: float
    map_coco: float
    per_class: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def evaluate(dets, gts, class_ids=None) -> EvalReport:
    """Full metrics report; classes without ground truth are skipped."""
    present = _classes_with_gt(gts)
    if class_ids is None:
        class_ids = present
    skipped = [c for c in class_ids if c not in present]
    scored = [c for c in class_ids if c in present]
    per_class = {
        c: average_precision(dets, gts, c, 0.5, Protocol.VOC07) for c in scored
    }
    return EvalReport(
        map50=map_voc(dets, gts, 0.5),
        map70=map_voc(dets, gts, 0.7),
        map_coco=map_coco_style(dets, gts),
        per_class=per_class,
        skipped=skipped,
    )


def format_metrics(report: EvalReport, class_names=None) -> str:
    def name(c):
        if class_names and 1 <= c <= len(class_names):
            return class_names[c - 1]
        return f"class_{c}"

    lines = [
        f"mAP@0.5  {report.map50:.4f}",
        f"mAP@0.7  {report.map70:.4f}",
        f"mAP[0.5:0.95]  {report.map_coco:.4f}",
    ]
    for c in sorted(report.per_class):
        lines.append(f"AP@0.5 {name(c)}  {report.per_class[c]:.4f}")
    for c in report.skipped:
        lines.append(f"AP@0.5 {name(c)}  skipped (no ground truth)")
    return "\n".join(lines)


def write_metrics_csv(path, report: EvalReport, class_names=None) -> None:
    import csv as _csv

    with Path(path).open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["map50", repr(report.map50)])
        writer.writerow(["map70", repr(report.map70)])
        writer.writerow(["map_coco", repr(report.map_coco)])
        for c in sorted(report.per_class):
            label = (
                class_names[c - 1]
                if class_names and 1 <= c <= len(class_names)
                else f"class_{c}"
            )
            writer.writerow([f"ap50_{label}", repr(report.per_class[c])])
        for c in report.skipped:
            label = (
                class_names[c - 1]
                if class_names and 1 <= c <= len(class_names)
                else f"class_{c}"
            )
            writer.writerow([f"ap50_{label}", "skipped"])


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def params_from_checkpoint(arrays) -> dict:
    """Wrap loaded checkpoint arrays as trainable-shaped tensors."""
    out = {}
    for name, value in arrays.items():
        out[name] = value if isinstance(value, Tensor) else Tensor(value)
    return out


def _vote_box(boxes, scores, keep: int, overlap: float) -> Box:
    """Score-weighted corner average of boxes overlapping the kept one.

    Suppressed near-duplicates each carry an independent localization
    estimate; pooling them tightens the kept box.
    """
    kept = boxes[keep]
    acc = np.zeros(4)
    total = 0.0
    for b, s in zip(boxes, scores):
        if iou(kept, b) >= overlap:
            acc += s * np.asarray(b.corners())
            total += s
    x1, y1, x2, y2 = acc / total
    return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def run_detector(
    params,
    dataset,
    config: BanConfig,
    rng_seed: int = 0,
    rois_per_image: int = 300,
    nms_thresh: float = 0.3,
    max_dets: int = 100,
    vote_overlap: "float | None" = 0.3,
) -> list[DetectionRecord]:
    """Score every dataset image and return kept detections.

    Per image: generate proposals, run the head, softmax the class
    scores, decode one box per proposal from the shared offsets, clip,
    apply per-class NMS, and keep the highest-scoring `max_dets`.  Each
    kept box is then replaced by the score-weighted average of the
    candidates overlapping it by at least `vote_overlap`; the default
    matches `nms_thresh`, so the vote pools exactly the cluster the
    keeper suppressed.  None skips the vote.
    """
    params = params_from_checkpoint(params)
    for i in range(1, 5):
        for leaf in ("w", "b"):
            if f"backbone.conv{i}.{leaf}" not in params:
                raise CheckpointError(f"checkpoint lacks backbone.conv{i}.{leaf}")
    detections: list[DetectionRecord] = []
    for rec in dataset:
        proposals = propose(
            [b for _, b in rec.gts],
            (rec.width, rec.height),
            rois_per_image,
            derive_seed(rng_seed, "detect", rec.image_id),
        )
        feats = backbone_forward(params, Tensor(rec.as_input()))
        validate_head_params(params, config, feats.shape[1])
        graph = head_forward_graph(params, feats, proposals, config)
        probs = softmax_rows(graph.class_scores.data)
        deltas = graph.box_deltas.data
        decoded = []
        for r, p in enumerate(proposals):
            t = RegressionTarget(*deltas[r])
            try:
                decoded.append(clip_box(decode_box(t, p), rec.width, rec.height))
            except GeometryError:
                decoded.append(None)  # landed fully outside the image
        image_dets = []
        for cls in range(1, config.num_classes + 1):
            boxes = [b for b in decoded if b is not None]
            scores = [
                float(probs[r, cls]) for r, b in enumerate(decoded) if b is not None
            ]
            for keep in nms(boxes, scores, nms_thresh):
                box = boxes[keep]
                if vote_overlap is not None:
                    box = clip_box(
                        _vote_box(boxes, scores, keep, vote_overlap),
                        rec.width,
                        rec.height,
                    )
                image_dets.append(
                    DetectionRecord(rec.image_id, cls, scores[keep], box)
                )
        image_dets.sort(key=lambda d: (-d.score, d.class_id))
        detections.extend(image_dets[:max_dets])
    return detections
