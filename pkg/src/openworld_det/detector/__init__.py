"""Desk-scale two-stage detector: conv backbone, RPN, box head and mask head."""
from .boxes import box_ioa, box_iou, decode_deltas, encode_deltas, ioa, iou, nms_indices, xywh_to_xyxy, xyxy_to_xywh
from .checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint
from .losses import (DETECTION_KEYS, LOSS_KEYS, BatchPlan, GtTargets, LossReport, NonFiniteLossError,
                     compute_losses)
from .model import (BackboneSpec, ConfigError, Detector, DetectorConfig, HeadOutputs, Proposals,
                    build_detector, images_to_tensor, make_anchors)
from .targets import BG, FG, IGNORE, Assignment, assign_labels, pseudo_label_targets, sample_minibatch

__all__ = [
    "Assignment", "BG", "BackboneSpec", "BatchPlan", "CheckpointError", "ConfigError", "DETECTION_KEYS",
    "Detector", "DetectorConfig", "FG", "GtTargets", "HeadOutputs", "IGNORE", "LOSS_KEYS", "LossReport",
    "NonFiniteLossError", "Proposals", "assign_labels", "box_ioa", "box_iou", "build_detector",
    "compute_losses", "decode_deltas", "encode_deltas", "images_to_tensor", "ioa", "iou", "load_checkpoint",
    "make_anchors", "nms_indices", "pseudo_label_targets", "read_meta", "sample_minibatch", "save_checkpoint",
    "xywh_to_xyxy", "xyxy_to_xywh",
]
