"""Shared fixtures for the gradient tests and the acceptance suite."""
from __future__ import annotations

import numpy as np
import torch

from openworld_det.annotations import apply_split
from openworld_det.backerase import BackEraseConfig, synthesize
from openworld_det.detector import DETECTION_KEYS, DetectorConfig, build_detector, compute_losses
from openworld_det.shapes import SPLIT, make_dataset
from openworld_det.trainer import TrainMode, _rngs, compute_step_losses, prepare_batch

SMALL = DetectorConfig(num_classes=3, category_ids=(1, 2, 3), rpn_batch=64, roi_batch=16,
                       rpn_pre_nms_topk=200, rpn_post_nms_topk=50, head_dim=32)


def micro_batch(seed: int, n: int = 2, size: int = 32):
    """``n`` real shapes images and their background-erased counterparts."""
    ds = apply_split(make_dataset(n, seed, size=size, min_size=8, max_size=14), SPLIT, "train_seen_only")
    real = [ds[i] for i in range(n)]
    cfg = BackEraseConfig(scale=0.25)
    synth = [synthesize(s, cfg, np.random.default_rng(seed * 100 + i)) for i, s in enumerate(real)]
    return real, synth


def double_detector(seed: int = 0, config: DetectorConfig = SMALL):
    from dataclasses import replace

    return build_detector(replace(config, param_seed=seed), dtype=torch.float64)


def _grads(detector, loss):
    detector.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in detector.named_parameters()}


def routing_check(seed: int) -> dict:
    """Largest relative gradient mismatch per head for one decoupled micro-batch."""
    det = double_detector(seed)
    real, synth = micro_batch(seed)
    mode = TrainMode("decoupled")
    losses, plans = compute_step_losses(det, real, synth, mode, seed)
    g_total = _grads(det, sum(losses.values()))

    # mask loss alone, computed from the real batch only
    images, gts, sizes = prepare_batch(real, det)
    mask_only, _ = compute_losses(det, images, gts, _rngs(seed, "real", len(gts)), parts=("mask",),
                                  plan=plans["real"], image_sizes=sizes)
    g_mask = _grads(det, mask_only["mask"])
    # detection losses alone, from the synthesized batch only
    images, gts, sizes = prepare_batch(synth, det)
    det_only, _ = compute_losses(det, images, gts, _rngs(seed, "synth", len(gts)), parts=("det",),
                                 plan=plans["synth"], image_sizes=sizes)
    g_det = _grads(det, sum(det_only[k] for k in DETECTION_KEYS))

    def rel(group, ref):
        worst = 0.0
        for n in det.parameter_group(group):
            a, b = g_total[n], ref[n]
            scale = max(float(a.abs().max()), float(b.abs().max()), 1e-30)
            worst = max(worst, float((a - b).abs().max()) / scale)
        return worst

    backbone_from = {
        "real": max(float(g_mask[n].abs().max()) for n in det.parameter_group("backbone")),
        "synth": max(float(g_det[n].abs().max()) for n in det.parameter_group("backbone")),
    }
    return {"mask_head": rel("mask_head", g_mask), "box_head": rel("box_head", g_det),
            "rpn": rel("rpn", g_det), "backbone_from": backbone_from,
            "fg": {d: plans[d].num_fg() for d in plans}}


def finite_difference_check(seed: int = 0, n_params: int = 20, eps: float = 1e-6) -> dict:
    """Worst relative error between autograd and central differences, per loss key."""
    det = double_detector(seed)
    real, _ = micro_batch(seed)
    images, gts, sizes = prepare_batch(real, det)
    _, plan = compute_losses(det, images, gts, _rngs(seed, "real", len(gts)), image_sizes=sizes)
    params = dict(det.named_parameters())
    rng = np.random.default_rng(seed)
    out = {}
    for key in ("rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "mask"):
        losses, _ = compute_losses(det, images, gts, plan=plan, image_sizes=sizes)
        grads = _grads(det, losses[key])
        # candidate scalars with a gradient large enough for a relative comparison
        cands = [(n, i) for n, g in grads.items() for i in np.flatnonzero(g.reshape(-1).abs().numpy() > 1e-7)]
        pick = rng.choice(len(cands), size=min(n_params, len(cands)), replace=False)
        worst = 0.0
        for j in pick:
            name, i = cands[j]
            p = params[name].data.view(-1)
            orig = float(p[i])
            with torch.no_grad():
                p[i] = orig + eps
                up = float(compute_losses(det, images, gts, plan=plan, image_sizes=sizes)[0][key])
                p[i] = orig - eps
                down = float(compute_losses(det, images, gts, plan=plan, image_sizes=sizes)[0][key])
                p[i] = orig
            fd = (up - down) / (2 * eps)
            an = float(grads[name].reshape(-1)[i])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
        out[key] = (worst, len(pick))
    return out


def random_eval_instance(rng, n_images=3, max_dets=10, max_gts=6):
    """Small random detection/gt fixture: ``{image_id: [Detection]}``, ``{image_id: [gt]}`` and oracle tuples."""
    from openworld_det.inference import Detection

    def boxes(n):
        xy = rng.integers(0, 24, (n, 2)).astype(float)
        wh = rng.integers(3, 12, (n, 2)).astype(float)
        return [tuple(v) for v in np.concatenate([xy, wh], 1)]

    dets, gts, per_image = {}, {}, []
    for img in range(1, n_images + 1):
        g = boxes(int(rng.integers(0, max_gts + 1)))
        # half the detections jitter a gt so that matches happen at several thresholds
        d = []
        for b in boxes(int(rng.integers(0, max_dets + 1))):
            if g and rng.random() < 0.5:
                b = tuple(np.asarray(g[rng.integers(len(g))]) + rng.integers(-2, 3, 4) * [1, 1, 0.5, 0.5])
            d.append((b, float(rng.integers(1, 50)) / 50, bool(rng.random() < 0.2)))
        dets[img] = [Detection(b, s, 1, None, seen, img) for b, s, seen in d]
        gts[img] = [Detection(b, 1.0, 1) for b in g]
        per_image.append((d, g))
    return dets, gts, per_image


def random_backerase_fixture(rng):
    """Random image, 1-3 instance masks and a BackErase config with post-smoothing off."""
    from openworld_det.annotations import ImageSample, InstanceAnnotation

    scale = float(rng.choice([1 / 2, 1 / 3, 1 / 4, 1 / 8]))
    lo = max(int(np.ceil(1 / scale)), 6)
    h, w = int(rng.integers(lo, 33)), int(rng.integers(lo, 33))
    anns = []
    for k in range(int(rng.integers(1, 4))):
        bw, bh = int(rng.integers(1, w + 1)), int(rng.integers(1, h + 1))
        x, y = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
        m = np.zeros((h, w), dtype=np.uint8)
        m[y:y + bh, x:x + bw] = rng.random((bh, bw)) < 0.8
        m[y, x] = 1
        anns.append(InstanceAnnotation(k + 1, (x, y, bw, bh), m, k + 1))
    img = rng.random((h, w, int(rng.choice([1, 3]))))
    cfg = BackEraseConfig(scale=scale, pre_smooth_sigma=float(rng.choice([0.0, 0.7, 1.0, 1.5])),
                          mask_smooth_sigma=float(rng.choice([0.0, 1.0, 2.0])), post_smooth_sigma=0.0,
                          resample=str(rng.choice(["bilinear", "nearest"])),
                          foreground_scale=None if rng.random() < 0.7 else float(rng.choice([0.5, 1.0])))
    return ImageSample(int(rng.integers(1, 10 ** 6)), img, tuple(anns)), cfg
