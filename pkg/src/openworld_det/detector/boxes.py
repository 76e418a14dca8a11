"""Box geometry on numpy arrays.

Public scalar helpers take ``(x, y, w, h)`` boxes like COCO; the vectorized
helpers work on ``(N, 4)`` arrays of ``(x0, y0, x1, y1)`` corners.
"""
from __future__ import annotations

import math

import numpy as np

# clamp for exp() of predicted log-size deltas
MAX_DLOG = math.log(1000.0 / 16)


def xywh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([b[:, :2], b[:, :2] + b[:, 2:]], axis=1)


def xyxy_to_xywh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([b[:, :2], b[:, 2:] - b[:, :2]], axis=1)


def area(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` xyxy arrays; 0 for empty unions."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def iou(a, b) -> float:
    """IoU of two ``(x, y, w, h)`` boxes."""
    return float(box_iou(xywh_to_xyxy(a), xywh_to_xyxy(b))[0, 0])


def box_ioa(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Area of each proposal covered by the union of ``gts``, over the proposal's area.

    The union is handled exactly by splitting the plane on every gt edge: the
    covered cells of that grid are fixed, and the overlap of a proposal with
    a cell factors into an x-length times a y-length.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    out = np.zeros(len(proposals))
    gts = gts[area(gts) > 0]
    if len(proposals) == 0 or len(gts) == 0:
        return out
    xs = np.unique(np.concatenate([gts[:, 0], gts[:, 2]]))
    ys = np.unique(np.concatenate([gts[:, 1], gts[:, 3]]))
    cx = (xs[:-1] + xs[1:]) / 2
    cy = (ys[:-1] + ys[1:]) / 2
    inside_x = (gts[:, None, 0] <= cx) & (cx < gts[:, None, 2])  # (G, nx)
    inside_y = (gts[:, None, 1] <= cy) & (cy < gts[:, None, 3])  # (G, ny)
    covered = np.einsum("gi,gj->ij", inside_x.astype(np.int64), inside_y.astype(np.int64)) > 0
    ox = np.clip(np.minimum(proposals[:, 2:3], xs[1:]) - np.maximum(proposals[:, 0:1], xs[:-1]), 0, None)
    oy = np.clip(np.minimum(proposals[:, 3:4], ys[1:]) - np.maximum(proposals[:, 1:2], ys[:-1]), 0, None)
    inter = np.einsum("ni,ij,nj->n", ox, covered.astype(np.float64), oy)
    a = area(proposals)
    np.divide(inter, a, out=out, where=a > 0)
    return np.clip(out, 0.0, 1.0)


def ioa(proposal, gts) -> float:
    """IoA of one ``(x, y, w, h)`` proposal against a list of ``(x, y, w, h)`` gts."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    return float(box_ioa(xywh_to_xyxy(proposal), xywh_to_xyxy(gts))[0])


def clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def encode_deltas(src: np.ndarray, dst: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """``(dx, dy, dlog w, dlog h)`` taking ``src`` boxes onto ``dst`` boxes."""
    wx, wy, ww, wh = weights
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    dw, dh = dst[:, 2] - dst[:, 0], dst[:, 3] - dst[:, 1]
    dx, dy = dst[:, 0] + 0.5 * dw, dst[:, 1] + 0.5 * dh
    return np.stack([wx * (dx - sx) / sw, wy * (dy - sy) / sh,
                     ww * np.log(dw / sw), wh * np.log(dh / sh)], axis=1)


def decode_deltas(src: np.ndarray, deltas: np.ndarray, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    wx, wy, ww, wh = weights
    sw, sh = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
    sx, sy = src[:, 0] + 0.5 * sw, src[:, 1] + 0.5 * sh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, MAX_DLOG)
    dh = np.minimum(deltas[:, 3] / wh, MAX_DLOG)
    cx, cy = sx + dx * sw, sy + dy * sh
    w, h = sw * np.exp(dw), sh * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS. Returns kept indices in descending score order (stable on ties).

    A box survives when its IoU with every already kept box is at most
    ``iou_threshold``. Stops after ``max_keep`` survivors.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    boxes = boxes[order]
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    limit = len(order) if max_keep is None else max_keep
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        if len(keep) >= limit:
            break
        suppressed[i + 1:] |= box_iou(boxes[i], boxes[i + 1:])[0] > iou_threshold
    return np.asarray(keep, dtype=np.int64)
