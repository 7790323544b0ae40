"""Boundary-context ensemble object detector, self-contained and CPU-only."""

from .backbone import STRIDE as BACKBONE_STRIDE
from .backbone import backbone_forward, build_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    BanError,
    CheckpointError,
    ConfigError,
    DimensionError,
    GeometryError,
    NumericError,
)
from .evaluation import (
    DetectionRecord,
    EvalReport,
    Protocol,
    average_precision,
    evaluate,
    map_coco_style,
    map_voc,
    run_detector,
)
from .geometry import (
    Box,
    ContextKind,
    RegressionTarget,
    clip_box,
    decode_box,
    encode_box,
    generate_context,
    iou,
    nms,
)
from .head import (
    BanConfig,
    HeadOutput,
    backward_sharing_check,
    build_head,
    contribution_analysis,
    forward,
    local_activation_map,
    subnet_kinds,
)
from .pooling import PoolMode, PoolSpec, psroi_pool, roi_pool, vote
from .synthetic import SyntheticSpec, generate_dataset, load_dataset
from .tensor import Tensor, conv2d, concat_channels, fully_connected, grad_check, relu
from .training import SgdConfig, build_model, propose, train

__all__ = [
    "BACKBONE_STRIDE",
    "BanConfig",
    "BanError",
    "Box",
    "CheckpointError",
    "ConfigError",
    "ContextKind",
    "DetectionRecord",
    "DimensionError",
    "EvalReport",
    "GeometryError",
    "HeadOutput",
    "NumericError",
    "PoolMode",
    "PoolSpec",
    "Protocol",
    "RegressionTarget",
    "SgdConfig",
    "SyntheticSpec",
    "Tensor",
    "average_precision",
    "backbone_forward",
    "backward_sharing_check",
    "build_backbone",
    "build_head",
    "build_model",
    "clip_box",
    "concat_channels",
    "contribution_analysis",
    "conv2d",
    "decode_box",
    "encode_box",
    "evaluate",
    "forward",
    "fully_connected",
    "generate_context",
    "generate_dataset",
    "grad_check",
    "iou",
    "load_checkpoint",
    "load_dataset",
    "local_activation_map",
    "map_coco_style",
    "map_voc",
    "nms",
    "propose",
    "psroi_pool",
    "relu",
    "roi_pool",
    "run_detector",
    "save_checkpoint",
    "subnet_kinds",
    "train",
    "vote",
]

__version__ = "0.1.0"
