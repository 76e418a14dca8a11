"""Label assignment, minibatch sampling and pseudo-labels for training regions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import box_ioa, box_iou
from .model import DetectorConfig

FG, BG, IGNORE = 1, 0, -1


@dataclass
class Assignment:
    labels: np.ndarray  # FG / BG / IGNORE per proposal
    matched: np.ndarray  # index of the best-IoU gt, -1 when there is no gt
    max_iou: np.ndarray
    ioa: np.ndarray | None = None  # only computed in ioa sampling mode


def assign_labels(proposals: np.ndarray, gt_boxes: np.ndarray, config: DetectorConfig,
                  stage: str) -> Assignment:
    """Foreground/background labels by IoU with the nearest ground truth.

    ``rpn``: fg at IoU >= rpn_fg_iou, or when the proposal is a best match of
    some gt; bg below rpn_bg_iou; otherwise ignored. ``roi``: fg at IoU >=
    roi_fg_iou, bg otherwise. With ``sampling_mode="ioa"`` only background
    regions whose IoA with the gts exceeds ``ioa_threshold`` stay in the
    background pool; the rest are ignored.
    """
    if stage not in ("rpn", "roi"):
        raise ValueError(f"stage must be 'rpn' or 'roi', got {stage!r}")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(proposals)
    if len(gt_boxes) == 0:
        labels = np.full(n, BG, dtype=np.int8)
        matched = np.full(n, -1, dtype=np.int64)
        max_iou = np.zeros(n)
    else:
        ious = box_iou(proposals, gt_boxes)
        matched = ious.argmax(axis=1)
        max_iou = ious[np.arange(n), matched] if n else np.zeros(0)
        if stage == "rpn":
            labels = np.full(n, IGNORE, dtype=np.int8)
            labels[max_iou < config.rpn_bg_iou] = BG
            labels[max_iou >= config.rpn_fg_iou] = FG
            # low-quality matches: every proposal tied for a gt's best IoU
            if n:
                best_per_gt = ious.max(axis=0)
                ties = (ious == best_per_gt[None, :]) & (best_per_gt[None, :] > 0)
                hit = ties.any(axis=1)
                labels[hit] = FG
                # a low-quality fg takes the gt it is the best match for
                tie_gt = np.where(ties, ious, -1.0).argmax(axis=1)
                low = hit & (max_iou < config.rpn_fg_iou)
                matched = np.where(low, tie_gt, matched)
        else:
            labels = np.where(max_iou >= config.roi_fg_iou, FG, BG).astype(np.int8)

    ioa = None
    if config.sampling_mode == "ioa":
        ioa = box_ioa(proposals, gt_boxes)
        labels[(labels == BG) & ~(ioa > config.ioa_threshold)] = IGNORE
    return Assignment(labels, matched, max_iou, ioa)


def sample_minibatch(labels: np.ndarray, batch_size: int, positive_fraction: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Random subset with at most ``batch_size * positive_fraction`` positives.

    Missing positives are made up with negatives. Returns indices, positives
    first.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == FG)
    neg = np.flatnonzero(labels == BG)
    n_pos = min(len(pos), int(batch_size * positive_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = rng.permutation(pos)[:n_pos]
    neg = rng.permutation(neg)[:n_neg]
    return np.concatenate([pos, neg]).astype(np.int64)


def sample_for_stage(labels: np.ndarray, config: DetectorConfig, rng: np.random.Generator,
                     stage: str) -> np.ndarray:
    if stage == "rpn":
        return sample_minibatch(labels, config.rpn_batch, config.rpn_pos_fraction, rng)
    return sample_minibatch(labels, config.roi_batch, config.roi_pos_fraction, rng)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pseudo_label_targets(class_logits: np.ndarray, targets: np.ndarray, threshold: float):
    """Relabel confident background regions with their top foreground class.

    ``targets`` holds 0 for background and 1..K for foreground classes.
    Returns ``(new_targets, relabeled_mask, max_fg_prob)``.
    """
    probs = softmax(np.asarray(class_logits, dtype=np.float64).reshape(len(targets), -1))
    fg = probs[:, 1:]
    best = fg.argmax(axis=1) + 1
    best_prob = fg.max(axis=1) if fg.shape[1] else np.zeros(len(targets))
    relabel = (np.asarray(targets) == 0) & (best_prob > threshold)
    new = np.where(relabel, best, targets).astype(np.int64)
    return new, relabel, best_prob
