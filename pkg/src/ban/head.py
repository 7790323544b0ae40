"""The boundary-context ensemble detection head.

One sub-network per configured context region (plus the base region)
scores every proposal; the head's output is the elementwise sum of the
sub-network scores.  Because the aggregation is a plain sum, the
gradient of any loss with respect to each sub-network's voted score is
identical to its gradient at the aggregate, and zeroing one
sub-network's output convolutions reproduces, exactly, the detector
built without that context.

Two head modes are supported:

* position-sensitive ("psroi"): an optional shared 1x1 trunk conv +
  ReLU, then per sub-network one 1x1 conv producing (C+1)*k*k
  classification channels and one producing regression_dims*k*k
  regression channels; each context region is pooled
  position-sensitively and its k*k bins vote by averaging.
* plain ("roi"): per sub-network a 1x1 conv + ReLU onto
  roi_feature_channels maps, max pooling of each context region, then
  concatenation and a single pair of fully connected layers.  The
  shared_features flag has no effect here; it controls only the
  position-sensitive trunk conv.

Sub-network weights draw from Gaussian(0, 0.01) with a stream seeded
per parameter name, so two configs sharing a sub-network initialize it
identically regardless of which other contexts are present.
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import STRIDE as BACKBONE_STRIDE
from .backbone import backbone_forward
from .errors import CheckpointError, ConfigError, DimensionError
from .geometry import FAMILIES, Box, ContextKind, boxes_to_corners, generate_context
from .pooling import PoolMode, PoolSpec, psroi_pool_rois, roi_pool_rois, vote
from .rng import XorShift64Star, derive_seed
from .tensor import (
    Tensor,
    add_n,
    concat_channels,
    conv2d,
    fully_connected,
    parameter,
    relu,
    reshape,
    weighted_sum,
)

# sub-network display order used everywhere: reports, CSVs, summation
_CANONICAL = (
    ContextKind.BASE,
    ContextKind.SIDE_TOP,
    ContextKind.SIDE_BOTTOM,
    ContextKind.SIDE_LEFT,
    ContextKind.SIDE_RIGHT,
    ContextKind.VERTEX_TL,
    ContextKind.VERTEX_BR,
    ContextKind.VERTEX_TR,
    ContextKind.VERTEX_BL,
    ContextKind.IN_BOUNDARY,
    ContextKind.OUT_BOUNDARY,
)

DISPLAY_NAMES = {
    ContextKind.BASE: "Base",
    ContextKind.SIDE_TOP: "Up",
    ContextKind.SIDE_BOTTOM: "Down",
    ContextKind.SIDE_LEFT: "Left",
    ContextKind.SIDE_RIGHT: "Right",
    ContextKind.VERTEX_TL: "NW",
    ContextKind.VERTEX_TR: "NE",
    ContextKind.VERTEX_BR: "SE",
    ContextKind.VERTEX_BL: "SW",
    ContextKind.IN_BOUNDARY: "In",
    ContextKind.OUT_BOUNDARY: "Out",
}

_KIND_FAMILY = {kind: fam for fam, kinds in FAMILIES.items() for kind in kinds}

DEFAULT_SPATIAL_SCALE = 1.0 / BACKBONE_STRIDE


@dataclass(frozen=True)
class BanConfig:
    """Which contexts to ensemble and how the head is laid out."""

    contexts: frozenset = frozenset(("S", "V", "B"))
    k: int = 5
    head_mode: PoolMode = PoolMode.PSROI
    shared_features: bool = True
    num_classes: int = 3
    regression_dims: int = 4
    trunk_channels: int = 1024
    roi_feature_channels: int = 256

    def __post_init__(self):
        object.__setattr__(self, "contexts", frozenset(self.contexts))
        unknown = self.contexts - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown context families {sorted(unknown)}")
        if not 1 <= self.k <= 7:
            raise ConfigError(f"k={self.k} outside [1, 7]")
        if not isinstance(self.head_mode, PoolMode):
            raise ConfigError(f"bad head_mode {self.head_mode!r}")
        for name in ("num_classes", "regression_dims", "trunk_channels",
                     "roi_feature_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


def subnet_kinds(config: BanConfig) -> list[ContextKind]:
    """Base plus every configured context, in canonical order."""
    kinds = [ContextKind.BASE]
    for kind in _CANONICAL[1:]:
        if _KIND_FAMILY[kind] in config.contexts:
            kinds.append(kind)
    return kinds


def expected_param_shapes(
    config: BanConfig, in_channels: int
) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape map defining the head's parameter set."""
    kinds = subnet_kinds(config)
    k2 = config.k * config.k
    cls_out = (config.num_classes + 1) * k2
    reg_out = config.regression_dims * k2
    shapes: "OrderedDict[str, tuple[int, ...]]" = OrderedDict()
    if config.head_mode is PoolMode.PSROI:
        t = config.trunk_channels
        if config.shared_features:
            shapes["head.trunk.w"] = (t, in_channels, 1, 1)
            shapes["head.trunk.b"] = (t,)
        else:
            for kind in kinds:
                shapes[f"head.trunk.{kind.value}.w"] = (t, in_channels, 1, 1)
                shapes[f"head.trunk.{kind.value}.b"] = (t,)
        for kind in kinds:
            shapes[f"head.{kind.value}.cls.w"] = (cls_out, t, 1, 1)
            shapes[f"head.{kind.value}.cls.b"] = (cls_out,)
            shapes[f"head.{kind.value}.reg.w"] = (reg_out, t, 1, 1)
            shapes[f"head.{kind.value}.reg.b"] = (reg_out,)
    else:
        f = config.roi_feature_channels
        for kind in kinds:
            shapes[f"head.{kind.value}.feat.w"] = (f, in_channels, 1, 1)
            shapes[f"head.{kind.value}.feat.b"] = (f,)
        flat = len(kinds) * f * k2
        shapes["head.fc_cls.w"] = (flat, config.num_classes + 1)
        shapes["head.fc_cls.b"] = (config.num_classes + 1,)
        shapes["head.fc_reg.w"] = (flat, config.regression_dims)
        shapes["head.fc_reg.b"] = (config.regression_dims,)
    return shapes


def head_param_count(config: BanConfig, in_channels: int) -> int:
    total = 0
    for shape in expected_param_shapes(config, in_channels).values():
        total += int(np.prod(shape))
    return total


def build_head(
    config: BanConfig, rng_seed: int, in_channels: int = 128
) -> "OrderedDict[str, Tensor]":
    """Initialize head parameters: Gaussian(0, 0.01) weights, zero biases.

    Every parameter draws from its own stream keyed by name, so shared
    sub-networks match bit for bit across configs with the same seed.
    """
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in expected_param_shapes(config, in_channels).items():
        if name.endswith(".b"):
            params[name] = parameter(np.zeros(shape))
        else:
            gen = XorShift64Star(derive_seed(rng_seed, name))
            count = int(np.prod(shape))
            params[name] = parameter(gen.normals(count, 0.0, 0.01).reshape(shape))
    return params


def validate_head_params(params, config: BanConfig, in_channels: int) -> None:
    """Raise CheckpointError when params do not match the config layout."""
    for name, shape in expected_param_shapes(config, in_channels).items():
        if name not in params:
            raise CheckpointError(f"missing head parameter {name!r}")
        got = tuple(params[name].shape)
        if got != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {got}, config wants {shape}"
            )


@dataclass
class HeadOutput:
    """Per-proposal scores: raw (pre-softmax) class scores and box deltas."""

    class_scores: np.ndarray
    box_deltas: np.ndarray
    per_context_scores: "dict[ContextKind, np.ndarray] | None" = None
    per_context_deltas: "dict[ContextKind, np.ndarray] | None" = None


@dataclass
class HeadGraph:
    """Live autograd view of a head forward pass over R proposals."""

    kinds: list
    class_scores: Tensor  # [R, C+1]
    box_deltas: Tensor  # [R, regression_dims]
    voted_scores: dict = field(default_factory=dict)  # psroi: kind -> [R, C+1]
    voted_deltas: dict = field(default_factory=dict)


def _as_nchw(features: Tensor) -> Tensor:
    if features.ndim == 3:
        return reshape(features, (1,) + features.shape)
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise DimensionError("head forward takes one image of features")
        return features
    raise DimensionError(f"features rank {features.ndim}, want 3 or 4")


def _context_corners(proposals, kind: ContextKind) -> np.ndarray:
    return boxes_to_corners([generate_context(p, kind) for p in proposals])


def head_forward_graph(
    params,
    features: Tensor,
    proposals,
    config: BanConfig,
    spatial_scale: float = DEFAULT_SPATIAL_SCALE,
) -> HeadGraph:
    """Build the autograd graph scoring `proposals` against one image."""
    feats4 = _as_nchw(features)
    in_channels = feats4.shape[1]
    validate_head_params(params, config, in_channels)
    kinds = subnet_kinds(config)
    h, w = feats4.shape[2], feats4.shape[3]

    if config.head_mode is PoolMode.PSROI:
        spec = PoolSpec(k=config.k, spatial_scale=spatial_scale, mode=PoolMode.PSROI)
        if config.shared_features:
            shared = relu(
                conv2d(feats4, params["head.trunk.w"], params["head.trunk.b"])
            )
            trunk = {kind: shared for kind in kinds}
        else:
            trunk = {
                kind: relu(
                    conv2d(
                        feats4,
                        params[f"head.trunk.{kind.value}.w"],
                        params[f"head.trunk.{kind.value}.b"],
                    )
                )
                for kind in kinds
            }
        voted_scores = {}
        voted_deltas = {}
        for kind in kinds:
            corners = _context_corners(proposals, kind)
            cls_map = conv2d(
                trunk[kind],
                params[f"head.{kind.value}.cls.w"],
                params[f"head.{kind.value}.cls.b"],
            )
            cls_map3 = reshape(cls_map, cls_map.shape[1:])
            voted_scores[kind] = vote(psroi_pool_rois(cls_map3, corners, spec))
            reg_map = conv2d(
                trunk[kind],
                params[f"head.{kind.value}.reg.w"],
                params[f"head.{kind.value}.reg.b"],
            )
            reg_map3 = reshape(reg_map, reg_map.shape[1:])
            voted_deltas[kind] = vote(psroi_pool_rois(reg_map3, corners, spec))
        class_scores = add_n([voted_scores[kind] for kind in kinds])
        box_deltas = add_n([voted_deltas[kind] for kind in kinds])
        return HeadGraph(kinds, class_scores, box_deltas, voted_scores, voted_deltas)

    spec = PoolSpec(k=config.k, spatial_scale=spatial_scale, mode=PoolMode.ROI)
    pooled = []
    for kind in kinds:
        feat_map = relu(
            conv2d(
                feats4,
                params[f"head.{kind.value}.feat.w"],
                params[f"head.{kind.value}.feat.b"],
            )
        )
        feat3 = reshape(feat_map, feat_map.shape[1:])
        corners = _context_corners(proposals, kind)
        pooled.append(roi_pool_rois(feat3, corners, spec))
    cat = concat_channels(pooled)
    flat_dim = cat.shape[1] * cat.shape[2] * cat.shape[3]
    flat = reshape(cat, (cat.shape[0], flat_dim))
    class_scores = fully_connected(flat, params["head.fc_cls.w"], params["head.fc_cls.b"])
    box_deltas = fully_connected(flat, params["head.fc_reg.w"], params["head.fc_reg.b"])
    return HeadGraph(kinds, class_scores, box_deltas)


def forward(
    params,
    features: Tensor,
    proposals,
    config: BanConfig,
    spatial_scale: float = DEFAULT_SPATIAL_SCALE,
) -> list[HeadOutput]:
    """Score proposals; returns one HeadOutput per proposal, in order."""
    graph = head_forward_graph(params, features, proposals, config, spatial_scale)
    outs = []
    per_ctx = config.head_mode is PoolMode.PSROI
    for r in range(len(proposals)):
        outs.append(
            HeadOutput(
                class_scores=graph.class_scores.data[r].copy(),
                box_deltas=graph.box_deltas.data[r].copy(),
                per_context_scores=(
                    {k: graph.voted_scores[k].data[r].copy() for k in graph.kinds}
                    if per_ctx
                    else None
                ),
                per_context_deltas=(
                    {k: graph.voted_deltas[k].data[r].copy() for k in graph.kinds}
                    if per_ctx
                    else None
                ),
            )
        )
    return outs


@dataclass
class SharingReport:
    """Gradients observed at the aggregate and at each sub-network."""

    aggregate: np.ndarray
    per_context: "dict[ContextKind, np.ndarray]"


def backward_sharing_check(
    params,
    features: Tensor,
    proposal: Box,
    config: BanConfig,
    spatial_scale: float = DEFAULT_SPATIAL_SCALE,
    rng_seed: int = 0,
) -> SharingReport:
    """Backpropagate a random linear loss and report sub-network gradients.

    With the summing aggregator, each sub-network's voted score must
    receive exactly the aggregate-score gradient.
    """
    if config.head_mode is not PoolMode.PSROI:
        raise ConfigError("gradient sharing is defined for the summing (psroi) head")
    graph = head_forward_graph(params, features, [proposal], config, spatial_scale)
    gen = XorShift64Star(derive_seed(rng_seed, "sharing-check"))
    upstream = gen.normals(graph.class_scores.size).reshape(graph.class_scores.shape)
    loss = weighted_sum(graph.class_scores, upstream)
    loss.backward()
    return SharingReport(
        aggregate=graph.class_scores.grad.copy(),
        per_context={
            kind: graph.voted_scores[kind].grad.copy() for kind in graph.kinds
        },
    )


def zero_context_convs(params, config: BanConfig, kind: ContextKind) -> None:
    """Silence one sub-network by zeroing its output convolutions."""
    if config.head_mode is not PoolMode.PSROI:
        raise ConfigError("only the summing (psroi) head supports zeroed contexts")
    if kind not in subnet_kinds(config):
        raise ConfigError(f"context {kind} is not part of this config")
    for stem in ("cls", "reg"):
        for leaf in ("w", "b"):
            params[f"head.{kind.value}.{stem}.{leaf}"].data[...] = 0.0


def local_activation_map(
    params,
    features: Tensor,
    proposal: Box,
    context: ContextKind,
    class_id: int,
    config: BanConfig,
    spatial_scale: float = DEFAULT_SPATIAL_SCALE,
) -> np.ndarray:
    """The k x k position-sensitive score cells one sub-network sees.

    Cell (i, j) is the pooled classification score of `class_id` in bin
    (i, j) of the context region; averaging the grid reproduces that
    sub-network's voted score for the class.
    """
    if config.head_mode is not PoolMode.PSROI:
        raise ConfigError("activation maps exist only for the psroi head")
    if context not in subnet_kinds(config):
        raise ConfigError(f"context {context} is not part of this config")
    if not 0 <= class_id <= config.num_classes:
        raise DimensionError(f"class_id {class_id} outside [0, {config.num_classes}]")
    feats4 = _as_nchw(features)
    validate_head_params(params, config, feats4.shape[1])
    if config.shared_features:
        trunk = relu(conv2d(feats4, params["head.trunk.w"], params["head.trunk.b"]))
    else:
        trunk = relu(
            conv2d(
                feats4,
                params[f"head.trunk.{context.value}.w"],
                params[f"head.trunk.{context.value}.b"],
            )
        )
    cls_map = conv2d(
        trunk,
        params[f"head.{context.value}.cls.w"],
        params[f"head.{context.value}.cls.b"],
    )
    cls_map3 = reshape(cls_map, cls_map.shape[1:])
    spec = PoolSpec(k=config.k, spatial_scale=spatial_scale, mode=PoolMode.PSROI)
    corners = _context_corners([proposal], context)
    pooled = psroi_pool_rois(cls_map3, corners, spec)
    return pooled.data[0, class_id].copy()


@dataclass
class ContributionResult:
    """Normalized absolute score shares per sub-network."""

    kinds: list
    cls_rows: list
    cls: np.ndarray  # [len(cls_rows), len(kinds)]
    loc_rows: list
    loc: np.ndarray  # [len(loc_rows), len(kinds)]
    skipped: list


def contribution_analysis(
    params,
    dataset,
    config: BanConfig,
    spatial_scale: float = DEFAULT_SPATIAL_SCALE,
    rois_per_image: int = 64,
    rng_seed: int = 0,
    class_names=None,
) -> ContributionResult:
    """Average each sub-network's share of the ensemble output.

    For a proposal assigned label u, sub-network c's classification
    share is |s_c,u| / sum_c' |s_c',u| over its voted scores, averaged
    per label across every sampled proposal; rows therefore sum to one.
    Localization shares are computed the same way on the regression
    outputs, per coordinate, over all proposals.  Classes that no
    proposal was assigned to are skipped and reported.
    """
    from .training import assign_labels, propose

    if config.head_mode is not PoolMode.PSROI:
        raise ConfigError("contribution analysis needs per-context scores (psroi)")
    kinds = subnet_kinds(config)
    n = len(kinds)
    n_rows = config.num_classes + 1
    cls_accum = np.zeros((n_rows, n))
    cls_count = np.zeros(n_rows, dtype=np.int64)
    loc_accum = np.zeros((config.regression_dims, n))
    loc_count = np.zeros(config.regression_dims, dtype=np.int64)

    for rec in dataset:
        gt_boxes = [b for _, b in rec.gts]
        proposals = propose(
            gt_boxes,
            (rec.width, rec.height),
            rois_per_image,
            derive_seed(rng_seed, "contribution", rec.image_id),
        )
        labeled = assign_labels(proposals, rec.gts)
        image = Tensor(rec.as_input())
        feats = backbone_forward(params, image)
        graph = head_forward_graph(params, feats, proposals, config, spatial_scale)
        scores = np.stack(
            [graph.voted_scores[kind].data for kind in kinds]
        )  # [n, R, C+1]
        deltas = np.stack([graph.voted_deltas[kind].data for kind in kinds])
        abs_s = np.abs(scores)
        abs_d = np.abs(deltas)
        denom_s = abs_s.sum(axis=0)  # [R, C+1]
        denom_d = abs_d.sum(axis=0)  # [R, Rd]
        for r, roi in enumerate(labeled):
            u = roi.label
            if denom_s[r, u] > 0:
                cls_accum[u] += abs_s[:, r, u] / denom_s[r, u]
                cls_count[u] += 1
            for d in range(config.regression_dims):
                if denom_d[r, d] > 0:
                    loc_accum[d] += abs_d[:, r, d] / denom_d[r, d]
                    loc_count[d] += 1

    if class_names is not None and len(class_names) != config.num_classes:
        raise ConfigError("one class name per foreground class required")
    labels = ["bkgd"] + [
        class_names[i] if class_names else f"class_{i + 1}"
        for i in range(config.num_classes)
    ]
    keep = cls_count > 0
    skipped = [labels[i] for i in range(n_rows) if not keep[i]]
    cls = cls_accum[keep] / cls_count[keep, None]
    cls_rows = [labels[i] for i in range(n_rows) if keep[i]]
    coord_names = ["cx", "cy", "width", "height"]
    loc_rows = [
        coord_names[d] if d < 4 else f"dim_{d}" for d in range(config.regression_dims)
    ]
    loc = np.zeros_like(loc_accum)
    nz = loc_count > 0
    loc[nz] = loc_accum[nz] / loc_count[nz, None]
    return ContributionResult(kinds, cls_rows, cls, loc_rows, loc, skipped)


def write_contribution_csv(path, kinds, row_labels, matrix) -> None:
    """One header row of sub-network names, then one row per label.

    Values are written with full round-trip precision so row sums
    survive serialization exactly.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [DISPLAY_NAMES[k] for k in kinds])
        for label, row in zip(row_labels, matrix):
            writer.writerow([label] + [repr(float(v)) for v in row])
