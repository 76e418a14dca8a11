"""Class-agnostic inference on a class-discriminative detector.

The objectness of a region is the summed softmax probability of all
foreground classes (equivalently one minus the background probability). The
box and mask of a region come from the highest-scoring foreground class.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .annotations import rle_decode, rle_encode
from .detector import Detector, decode_deltas, nms_indices, xywh_to_xyxy, xyxy_to_xywh
from .detector.boxes import clip_boxes
from .detector.model import ROI_DELTA_WEIGHTS, images_to_tensor


class InvalidModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    roi_nms_threshold: float = 0.7
    rpn_post_nms_topk: int = 2000
    rpn_pre_nms_topk: int = 2000
    rpn_nms_threshold: float = 0.7
    score_threshold: float = 0.0
    max_detections: int = 100
    mask_threshold: float = 0.5
    with_masks: bool = True

    def __post_init__(self):
        for name in ("roi_nms_threshold", "rpn_nms_threshold", "score_threshold", "mask_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.rpn_post_nms_topk < 1 or self.rpn_pre_nms_topk < 1 or self.max_detections < 1:
            raise ValueError("top-k limits must be >= 1")


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x, y, w, h)
    score: float
    class_id: int
    mask: np.ndarray | None = None
    is_seen_class: bool | None = None
    image_id: int | None = None


def class_agnostic_score(class_logits):
    """Objectness and top foreground class from ``(..., K+1)`` logits (background first).

    Returns ``(objectness, argmax_class)`` with classes numbered 1..K.
    """
    z = np.asarray(class_logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    fg = p[..., 1:]
    objectness = fg.sum(axis=-1)
    argmax = fg.argmax(axis=-1) + 1
    if np.ndim(objectness) == 0:
        return float(objectness), int(argmax)
    return objectness, argmax


def nms(detections, iou_threshold: float) -> list:
    """Class-agnostic greedy NMS; output sorted by descending score."""
    detections = list(detections)
    if not detections:
        return []
    boxes = xywh_to_xyxy([d.box for d in detections])
    keep = nms_indices(boxes, np.array([d.score for d in detections]), iou_threshold)
    return [detections[i] for i in keep]


def paste_masks(mask_probs: torch.Tensor, boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample ``(R, M, M)`` box-relative masks onto the ``(height, width)`` image grid."""
    r = len(boxes)
    if r == 0:
        return np.zeros((0, height, width))
    b = torch.as_tensor(boxes, dtype=mask_probs.dtype)
    xs = torch.arange(width, dtype=mask_probs.dtype) + 0.5
    ys = torch.arange(height, dtype=mask_probs.dtype) + 0.5
    bw = (b[:, 2] - b[:, 0]).clamp(min=1e-6)
    bh = (b[:, 3] - b[:, 1]).clamp(min=1e-6)
    gx = (xs[None, :] - b[:, 0:1]) / bw[:, None] * 2 - 1  # (R, W)
    gy = (ys[None, :] - b[:, 1:2]) / bh[:, None] * 2 - 1  # (R, H)
    grid = torch.stack([gx[:, None, :].expand(r, height, width), gy[:, :, None].expand(r, height, width)], dim=-1)
    out = F.grid_sample(mask_probs[:, None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[:, 0].numpy()


@torch.no_grad()
def infer(detector: Detector, image: np.ndarray, config: InferenceConfig = InferenceConfig(),
          image_id: int | None = None) -> list:
    """Detect objects in one ``(H, W, C)`` image, sorted by descending objectness."""
    if not detector.all_finite():
        raise InvalidModelError("detector has non-finite parameters")
    detector.eval()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    H, W = image.shape[:2]
    x = images_to_tensor([image], dtype=next(detector.parameters()).dtype)
    feats = detector.features(x)
    props = detector.propose(feats, [(H, W)], pre_nms_topk=config.rpn_pre_nms_topk,
                             post_nms_topk=config.rpn_post_nms_topk,
                             nms_threshold=config.rpn_nms_threshold)[0]
    if len(props) == 0:
        return []
    logits, deltas = detector.box_head(feats, [props.boxes])
    logits = logits.double().numpy()
    deltas = deltas.double().numpy()
    score, cls = class_agnostic_score(logits)
    cols = (cls - 1)[:, None] * 4 + np.arange(4)[None, :]
    d = np.take_along_axis(deltas, cols, axis=1)
    boxes = clip_boxes(decode_deltas(props.boxes, d, ROI_DELTA_WEIGHTS), H, W)
    ok = (score >= config.score_threshold) & ((boxes[:, 2] - boxes[:, 0]) > 0) & ((boxes[:, 3] - boxes[:, 1]) > 0)
    idx = np.flatnonzero(ok)
    keep = idx[nms_indices(boxes[idx], score[idx], config.roi_nms_threshold, config.max_detections)]
    if len(keep) == 0:
        return []
    masks = [None] * len(keep)
    if config.with_masks:
        mlog = detector.mask_head(feats, [boxes[keep]])
        sel = mlog[torch.arange(len(keep)), torch.as_tensor(cls[keep] - 1)]
        probs = paste_masks(torch.sigmoid(sel).double(), boxes[keep], H, W)
        masks = list((probs >= config.mask_threshold).astype(np.uint8))
    cat_ids = detector.config.category_ids
    xywh = xyxy_to_xywh(boxes[keep])
    return [Detection(tuple(float(v) for v in xywh[j]), float(np.clip(score[k], 0.0, 1.0)),
                      int(cat_ids[cls[k] - 1]), masks[j], None, image_id)
            for j, k in enumerate(keep)]


# -- COCO results JSON -------------------------------------------------------

def detections_to_json(detections) -> list:
    out = []
    for d in detections:
        rec = {"image_id": d.image_id, "bbox": [float(v) for v in d.box], "score": float(d.score),
               "category_id": int(d.class_id)}
        if d.mask is not None:
            rec["segmentation"] = rle_encode(d.mask)
        if d.is_seen_class is not None:
            rec["is_seen_class"] = bool(d.is_seen_class)
        out.append(rec)
    return out


def save_detections(path, detections) -> None:
    with open(path, "w") as f:
        json.dump(detections_to_json(detections), f, sort_keys=True)


def load_detections(path) -> dict:
    """Read a COCO results file into ``{image_id: [Detection, ...]}``."""
    with open(path) as f:
        recs = json.load(f)
    if not isinstance(recs, list):
        raise ValueError(f"{path}: expected a JSON array of detections")
    out: dict = {}
    for i, r in enumerate(recs):
        for key in ("image_id", "bbox", "score"):
            if key not in r:
                raise ValueError(f"{path}: detection {i} is missing key '{key}'")
        mask = rle_decode(r["segmentation"]) if "segmentation" in r else None
        det = Detection(tuple(float(v) for v in r["bbox"]), float(r["score"]), int(r.get("category_id", 1)),
                        mask, r.get("is_seen_class"), int(r["image_id"]))
        out.setdefault(det.image_id, []).append(det)
    return out


def with_image_id(detections, image_id: int) -> list:
    return [replace(d, image_id=image_id) for d in detections]
