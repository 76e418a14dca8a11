"""Class-agnostic AP and AR@k for open-world detection.

For AR@k, detections tagged as seen-class are removed from each image's
ranked list *before* it is cut to ``k``, so recall on the unseen objects is
not limited by boxes spent on seen ones. Per-image recall is averaged over
the IoU thresholds and then over the images that have at least one ground
truth. AP pools detections over images (at most 100 per image) and uses
101-point interpolated precision, averaged over the IoU thresholds.

Ground truths and detections are given as ``{image_id: [...]}`` mappings.
Ground-truth items need a ``box`` (x, y, w, h) and, for mask matching, a
``mask(h, w)`` method or ``mask`` array.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import box_iou, xywh_to_xyxy

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
SEEN_TAGGING = ("iou", "given", "none")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    budgets: tuple = (10, 30, 50, 100)
    exclude_seen_from_budget: bool = True
    match_target: str = "box"
    ap_max_detections: int = 100
    # how detections get their is_seen_class flag in evaluate()
    seen_tagging: str = "iou"
    seen_iou: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        object.__setattr__(self, "budgets", tuple(int(k) for k in self.budgets))
        if not self.iou_thresholds or any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("iou_thresholds must lie in (0, 1]")
        if not self.budgets or any(k <= 0 for k in self.budgets) or list(self.budgets) != sorted(set(self.budgets)):
            raise ValueError("budgets must be positive and strictly ascending")
        if self.match_target not in ("box", "mask"):
            raise ValueError("match_target must be 'box' or 'mask'")
        if self.seen_tagging not in SEEN_TAGGING:
            raise ValueError(f"seen_tagging must be one of {SEEN_TAGGING}")

    def to_dict(self) -> dict:
        return {"iou_thresholds": list(self.iou_thresholds), "budgets": list(self.budgets),
                "exclude_seen_from_budget": self.exclude_seen_from_budget, "match_target": self.match_target,
                "ap_max_detections": self.ap_max_detections, "seen_tagging": self.seen_tagging,
                "seen_iou": self.seen_iou}


@dataclass
class EvalReport:
    ap: float
    ar_at_k: dict
    per_image_matches: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    config: EvalConfig | None = None

    def to_dict(self, include_matches: bool = False) -> dict:
        d = {"ap": self.ap, "ar": {str(k): v for k, v in self.ar_at_k.items()}, "counts": self.counts,
             "config": self.config.to_dict() if self.config else None}
        if include_matches:
            d["matches"] = self.per_image_matches
        return d

    def write(self, path, include_matches: bool = False) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(include_matches), f, indent=2, sort_keys=True)


# -- overlaps ----------------------------------------------------------------

def _gt_mask(g, shape):
    m = getattr(g, "mask", None)
    if callable(m):
        return m(*shape)
    return np.asarray(m)


def mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, H, W)`` and ``(M, H, W)`` binary masks."""
    a = a.reshape(len(a), -1).astype(np.float64)
    b = b.reshape(len(b), -1).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def overlaps(dets, gts, target: str = "box") -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if target == "box":
        return box_iou(xywh_to_xyxy([d.box for d in dets]), xywh_to_xyxy([g.box for g in gts]))
    shape = dets[0].mask.shape
    dm = np.stack([np.asarray(d.mask) for d in dets])
    gm = np.stack([_gt_mask(g, shape) for g in gts])
    return mask_iou(dm, gm)


# -- matching ----------------------------------------------------------------

def match_greedy(ious: np.ndarray, iou_threshold: float) -> np.ndarray:
    """One-to-one greedy matching of score-sorted detections (rows) to gts (columns).

    Each detection in turn takes the still-unmatched gt with the highest IoU,
    if that IoU reaches the threshold (ties go to the lower gt index).
    Returns the matched gt index per detection, -1 when unmatched.
    """
    ious = np.asarray(ious, dtype=np.float64)
    n, m = ious.shape
    out = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=bool)
    for d in range(n):
        if taken.all():
            break
        row = np.where(taken, -1.0, ious[d])
        g = int(row.argmax())
        if row[g] >= iou_threshold:
            out[d] = g
            taken[g] = True
    return out


def _sorted(dets) -> list:
    order = np.argsort([-d.score for d in dets], kind="stable")
    return [dets[i] for i in order]


def _images_with_gts(gts) -> list:
    return [i for i in sorted(gts) if len(gts[i])]


def average_recall(detections: dict, gts: dict, config: EvalConfig = EvalConfig()) -> dict:
    """AR@k for every budget in ``config.budgets``."""
    images = _images_with_gts(gts)
    if not images:
        raise EvaluationError("no ground truth in any image; recall is undefined")
    totals = {k: 0.0 for k in config.budgets}
    for img in images:
        ranked = _sorted(list(detections.get(img, [])))
        if config.exclude_seen_from_budget:
            ranked = [d for d in ranked if not d.is_seen_class]
        g = list(gts[img])
        ious_full = overlaps(ranked[:max(config.budgets)], g, config.match_target)
        for k in config.budgets:
            ious = ious_full[:k]
            rec = [np.sum(match_greedy(ious, t) >= 0) / len(g) for t in config.iou_thresholds]
            totals[k] += float(np.mean(rec))
    return {k: totals[k] / len(images) for k in config.budgets}


def _pooled_matches(detections, gts, config, t):
    scores, tps = [], []
    for img in sorted(set(gts) | set(detections)):
        ranked = _sorted(list(detections.get(img, [])))[:config.ap_max_detections]
        if not ranked:
            continue
        m = match_greedy(overlaps(ranked, list(gts.get(img, [])), config.match_target), t)
        scores.extend(d.score for d in ranked)
        tps.extend(m >= 0)
    return np.asarray(scores, dtype=np.float64), np.asarray(tps, dtype=bool)


def interpolated_ap(scores: np.ndarray, tps: np.ndarray, num_gts: int) -> float:
    """101-point interpolated AP of a pooled, unsorted list of scored hits."""
    if num_gts == 0:
        raise EvaluationError("no ground truth; AP is undefined")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    recall = tp / num_gts
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.arange(101) / 100
    idx = np.searchsorted(recall, points, side="left")
    q = np.where(idx < len(recall), precision[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(q.mean())


def average_precision(detections: dict, gts: dict, config: EvalConfig = EvalConfig()) -> float:
    num_gts = sum(len(v) for v in gts.values())
    if num_gts == 0:
        raise EvaluationError("no ground truth in any image; AP is undefined")
    aps = []
    for t in config.iou_thresholds:
        scores, tps = _pooled_matches(detections, gts, config, t)
        aps.append(interpolated_ap(scores, tps, num_gts))
    return float(np.mean(aps))


def match_trace(detections: dict, gts: dict, config: EvalConfig) -> list:
    """``(image_id, iou_threshold, det_index, gt_index, iou)`` for every AP match."""
    out = []
    for img in sorted(gts):
        ranked = _sorted(list(detections.get(img, [])))[:config.ap_max_detections]
        ious = overlaps(ranked, list(gts[img]), config.match_target)
        for t in config.iou_thresholds:
            for d, g in enumerate(match_greedy(ious, t)):
                if g >= 0:
                    out.append({"image_id": int(img), "iou_threshold": t, "det": d, "gt": int(g),
                                "iou": float(ious[d, g])})
    return out


def tag_seen(detections: list, seen_gts: list, iou_threshold: float = 0.5, target: str = "box") -> list:
    """Flag detections that greedily match a seen-class ground truth."""
    ranked = _sorted(list(detections))
    if not seen_gts:
        return [replace(d, is_seen_class=False) for d in ranked]
    m = match_greedy(overlaps(ranked, list(seen_gts), target), iou_threshold)
    return [replace(d, is_seen_class=bool(j >= 0)) for d, j in zip(ranked, m)]


def evaluate(source, dataset, eval_config: EvalConfig = EvalConfig(), inference_config=None,
             out_path=None) -> EvalReport:
    """Evaluate a detector, a results file path, or an ``{image_id: [Detection]}`` mapping.

    ``dataset`` is the evaluation view (e.g. ``eval_unseen_only``): its
    annotations are the targets and its excluded seen-class annotations are
    used to tag seen-class detections.
    """
    from .detector import Detector
    from .inference import InferenceConfig, infer, load_detections

    if len(dataset) == 0:
        raise EvaluationError("evaluation dataset is empty")
    if isinstance(source, Detector):
        icfg = inference_config or InferenceConfig(with_masks=eval_config.match_target == "mask")
        dets = {}
        for i in range(len(dataset)):
            s = dataset[i]
            dets[s.image_id] = infer(source, s.image, icfg, image_id=s.image_id)
    elif isinstance(source, dict):
        dets = {k: list(v) for k, v in source.items()}
    else:
        dets = load_detections(source)

    gts, seen = {}, {}
    n_seen = 0
    for i, iid in enumerate(dataset.image_ids):
        anns = dataset.annotations(i)
        gts[iid] = [a for a in anns if a.is_seen is not True]
        seen[iid] = [a for a in (*anns, *dataset.excluded(i)) if a.is_seen]
        n_seen += len(seen[iid])
    dets = {iid: dets.get(iid, []) for iid in gts}

    if eval_config.seen_tagging == "iou":
        dets = {iid: tag_seen(d, seen[iid], eval_config.seen_iou, "box") for iid, d in dets.items()}
    elif eval_config.seen_tagging == "none":
        dets = {iid: [replace(x, is_seen_class=False) for x in d] for iid, d in dets.items()}

    report = EvalReport(
        ap=average_precision(dets, gts, eval_config),
        ar_at_k=average_recall(dets, gts, eval_config),
        per_image_matches=match_trace(dets, gts, eval_config),
        counts={"images": len(gts), "images_with_gts": len(_images_with_gts(gts)),
                "unseen_gts": sum(len(v) for v in gts.values()), "seen_gts": n_seen,
                "detections": sum(len(v) for v in dets.values())},
        config=eval_config,
    )
    if out_path:
        report.write(out_path)
    return report
