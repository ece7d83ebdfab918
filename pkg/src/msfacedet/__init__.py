"""Desk-scale two-stage face detector with multi-scale feature fusion.

Three backbone taps at strides 4/8/16 are L2-normalized per channel,
re-weighted by learnable factors, concatenated and shrunk to feed both a
region-proposal head and a per-region detection head; everything trains
jointly from scratch at double precision on synthetic scenes, and every
backward pass is verifiable against central finite differences.
"""

from .boxes import decode_deltas, encode_deltas, iou, iou_matrix, nms, project_roi
from .evaluation import EvalConfig, evaluate_dataset, match_detections, pr_curve_ap, roc_curve
from .model import ModelConfig, MultiScaleDetector
from .rpn import AnchorConfig, generate_anchors, propose
from .tensor import Tensor
from .toydata import ToyScene, generate_toy_dataset
from .training import TrainConfig, train

__all__ = [
    "AnchorConfig",
    "EvalConfig",
    "ModelConfig",
    "MultiScaleDetector",
    "Tensor",
    "ToyScene",
    "TrainConfig",
    "decode_deltas",
    "encode_deltas",
    "evaluate_dataset",
    "generate_anchors",
    "generate_toy_dataset",
    "iou",
    "iou_matrix",
    "match_detections",
    "nms",
    "pr_curve_ap",
    "project_roi",
    "propose",
    "roc_curve",
    "train",
]
