"""Training targets and losses for the two-stage detector.

Loss evaluation is split in two: a *plan* fixes everything that is not
differentiable (proposals, label assignment, sampled regions, regression and
mask targets, pseudo-labels), and the losses are then a smooth function of
the parameters given that plan. Reusing a plan makes finite-difference checks
and gradient-routing comparisons well defined.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import roi_align

from .boxes import encode_deltas
from .model import ROI_DELTA_WEIGHTS, RPN_DELTA_WEIGHTS, Detector
from .targets import BG, FG, assign_labels, pseudo_label_targets, sample_for_stage

LOSS_KEYS = ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "mask")
DETECTION_KEYS = LOSS_KEYS[:4]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, key: str, step: int | None = None):
        self.key = key
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss '{key}'{where}")


@dataclass
class GtTargets:
    boxes: np.ndarray  # (G, 4) xyxy
    classes: np.ndarray  # (G,) class index 1..K
    masks: np.ndarray | None = None  # (G, H, W)


@dataclass
class ImagePlan:
    rpn_idx: np.ndarray
    rpn_labels: np.ndarray
    rpn_fg_idx: np.ndarray
    rpn_reg_targets: np.ndarray
    roi_boxes: np.ndarray
    roi_targets: np.ndarray
    roi_fg: np.ndarray
    roi_reg_targets: np.ndarray
    mask_targets: np.ndarray | None
    trace: dict = field(default_factory=dict)


@dataclass
class BatchPlan:
    parts: frozenset
    images: list

    def num_fg(self) -> int:
        return int(sum(p.roi_fg.sum() for p in self.images))


@dataclass
class LossReport:
    """Scalar losses keyed ``"<domain>/<name>"`` (e.g. ``"synth/roi_cls"``)."""

    losses: dict
    total: float
    trace: dict = field(default_factory=dict)

    def domains(self, name: str) -> set:
        return {k.split("/")[0] for k in self.losses if k.split("/")[1] == name}

    def to_dict(self) -> dict:
        return {"losses": dict(self.losses), "total": self.total}


def _mask_targets(gt_masks: np.ndarray, boxes: np.ndarray, gt_index: np.ndarray, size: int) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, size, size))
    masks = torch.as_tensor(gt_masks[:, None].astype(np.float64))
    rois = torch.as_tensor(np.concatenate([gt_index[:, None].astype(np.float64), boxes], axis=1))
    out = roi_align(masks, rois, output_size=size, spatial_scale=1.0, sampling_ratio=2, aligned=True)
    return (out[:, 0] >= 0.5).double().numpy()


def _plan_image(detector: Detector, anchors: np.ndarray, proposals: np.ndarray, gt: GtTargets,
                parts: frozenset, rng_rpn: np.random.Generator, rng_roi: np.random.Generator) -> ImagePlan:
    cfg = detector.config
    trace = {}
    empty4 = np.zeros((0, 4))
    if "det" in parts:
        a = assign_labels(anchors, gt.boxes, cfg, "rpn")
        idx = sample_for_stage(a.labels, cfg, rng_rpn, "rpn")
        lab = (a.labels[idx] == FG).astype(np.float64)
        fg_idx = idx[a.labels[idx] == FG]
        reg = encode_deltas(anchors[fg_idx], gt.boxes[a.matched[fg_idx]], RPN_DELTA_WEIGHTS) if len(fg_idx) else empty4
        if a.ioa is not None:
            trace["rpn_bg_ioa"] = a.ioa[idx[a.labels[idx] == BG]].tolist()
    else:
        idx = fg_idx = np.zeros(0, dtype=np.int64)
        lab = np.zeros(0)
        reg = empty4

    boxes = np.concatenate([proposals.reshape(-1, 4), gt.boxes.reshape(-1, 4)], axis=0)
    a = assign_labels(boxes, gt.boxes, cfg, "roi")
    ridx = sample_for_stage(a.labels, cfg, rng_roi, "roi")
    roi_boxes = boxes[ridx]
    fg = a.labels[ridx] == FG
    matched = a.matched[ridx]
    targets = np.where(fg, gt.classes[np.maximum(matched, 0)] if len(gt.classes) else 0, 0).astype(np.int64)
    roi_reg = encode_deltas(roi_boxes[fg], gt.boxes[matched[fg]], ROI_DELTA_WEIGHTS) if fg.any() else empty4
    if a.ioa is not None and "det" in parts:
        trace["roi_bg_ioa"] = a.ioa[ridx[~fg]].tolist()
    mask_t = None
    if "mask" in parts:
        if gt.masks is None:
            raise ValueError("mask loss requested but ground-truth masks are missing")
        mask_t = _mask_targets(gt.masks, roi_boxes[fg], matched[fg], cfg.mask_resolution)
    return ImagePlan(idx, lab, fg_idx, reg, roi_boxes, targets, fg, roi_reg, mask_t, trace)


def _zero(ref: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=ref.dtype)


def compute_losses(detector: Detector, images: torch.Tensor, gts: list, rngs: list | None = None,
                   parts=("det", "mask"), plan: BatchPlan | None = None, image_sizes: list | None = None):
    """Loss tensors for one (padded) batch of images.

    ``parts`` selects ``"det"`` (rpn_cls, rpn_reg, roi_cls, roi_reg) and/or
    ``"mask"``. ``rngs`` holds one ``(rpn_rng, roi_rng)`` pair per image and is
    only needed when no ``plan`` is given. ``image_sizes`` gives the unpadded
    ``(h, w)`` of each image. Returns ``(losses, plan)``.
    """
    cfg = detector.config
    parts = frozenset(parts)
    feats = detector.features(images)
    if "det" in parts:
        rpn_logits, rpn_deltas = detector.rpn_forward(feats)
    elif plan is None:
        with torch.no_grad():
            rpn_logits, rpn_deltas = detector.rpn_forward(feats)
    new_plan = plan is None
    if new_plan:
        sizes = image_sizes or [tuple(images.shape[2:])] * images.shape[0]
        props = detector.propose(feats, sizes, rpn_out=(rpn_logits, rpn_deltas))
        anchors = detector.anchors(feats)
        plan = BatchPlan(parts, [
            _plan_image(detector, anchors, p.boxes, gt, parts, r[0], r[1])
            for p, gt, r in zip(props, gts, rngs)
        ])
    elif plan.parts != parts:
        raise ValueError(f"plan was built for parts {set(plan.parts)}, not {set(parts)}")

    out = {}
    ref = feats
    if "det" in parts:
        n_rpn = sum(len(p.rpn_idx) for p in plan.images)
        cls_terms, reg_terms = [], []
        for i, p in enumerate(plan.images):
            if len(p.rpn_idx):
                lab = torch.as_tensor(p.rpn_labels, dtype=ref.dtype)
                cls_terms.append(F.binary_cross_entropy_with_logits(
                    rpn_logits[i][torch.as_tensor(p.rpn_idx)], lab, reduction="sum"))
            if len(p.rpn_fg_idx):
                tgt = torch.as_tensor(p.rpn_reg_targets, dtype=ref.dtype)
                reg_terms.append(F.smooth_l1_loss(rpn_deltas[i][torch.as_tensor(p.rpn_fg_idx)], tgt,
                                                  beta=cfg.smooth_l1_beta, reduction="sum"))
        out["rpn_cls"] = sum(cls_terms) / n_rpn if cls_terms else _zero(ref)
        out["rpn_reg"] = sum(reg_terms) / max(n_rpn, 1) if reg_terms else _zero(ref)

        n_roi = sum(len(p.roi_boxes) for p in plan.images)
        if n_roi:
            logits, deltas = detector.box_head(feats, [p.roi_boxes for p in plan.images])
            if new_plan and cfg.pseudo_label:
                _apply_pseudo_labels(plan, logits.detach().double().numpy(), cfg.pseudo_threshold)
            targets = torch.as_tensor(np.concatenate([p.roi_targets for p in plan.images]))
            out["roi_cls"] = F.cross_entropy(logits, targets, reduction="mean")
            fg = np.concatenate([p.roi_fg for p in plan.images])
            if fg.any():
                fg_rows = torch.as_tensor(np.flatnonzero(fg))
                cls = targets[fg_rows] - 1
                cols = (cls[:, None] * 4 + torch.arange(4)[None, :])
                pred = deltas[fg_rows[:, None], cols]
                tgt = torch.as_tensor(np.concatenate([p.roi_reg_targets for p in plan.images]), dtype=ref.dtype)
                out["roi_reg"] = F.smooth_l1_loss(pred, tgt, beta=cfg.smooth_l1_beta, reduction="sum") / n_roi
            else:
                out["roi_reg"] = _zero(ref)
        else:
            out["roi_cls"] = _zero(ref)
            out["roi_reg"] = _zero(ref)

    if "mask" in parts:
        fg_boxes = [p.roi_boxes[p.roi_fg] for p in plan.images]
        if sum(len(b) for b in fg_boxes):
            logits = detector.mask_head(feats, fg_boxes)
            cls = np.concatenate([p.roi_targets[p.roi_fg] for p in plan.images]) - 1
            # pseudo-labels never touch fg rows, so these are gt classes
            sel = logits[torch.arange(len(cls)), torch.as_tensor(cls)]
            tgt = torch.as_tensor(np.concatenate([p.mask_targets for p in plan.images]), dtype=ref.dtype)
            out["mask"] = F.binary_cross_entropy_with_logits(sel, tgt, reduction="mean")
        else:
            out["mask"] = _zero(ref)

    for k, v in out.items():
        if not math.isfinite(float(v.detach())):
            raise NonFiniteLossError(k)
    return out, plan


def _apply_pseudo_labels(plan: BatchPlan, logits: np.ndarray, threshold: float) -> None:
    start = 0
    for p in plan.images:
        n = len(p.roi_boxes)
        new, relabeled, prob = pseudo_label_targets(logits[start:start + n], p.roi_targets, threshold)
        p.trace["pseudo_relabeled_prob"] = prob[relabeled].tolist()
        p.trace["pseudo_relabeled_class"] = new[relabeled].tolist()
        p.trace["pseudo_kept_bg_prob"] = prob[(p.roi_targets == 0) & ~relabeled].tolist()
        p.roi_targets = new
        start += n
