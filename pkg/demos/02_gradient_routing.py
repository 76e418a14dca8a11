"""
Where the gradients go in decoupled training
============================================

Detection losses come from the synthesized batch, the mask loss from the
real batch. Each head therefore hears from one domain only, while the
shared backbone hears from both. This script measures it directly.

Run:  python demos/02_gradient_routing.py
"""
import numpy as np
import torch

from openworld_det import BackEraseConfig, DetectorConfig, TrainMode, apply_split, build_detector, synthesize
from openworld_det.shapes import SPLIT, make_dataset
from openworld_det.trainer import compute_step_losses

torch.manual_seed(0)
ds = apply_split(make_dataset(2, seed=0), SPLIT, "train_seen_only")
real = [ds[0], ds[1]]
synth = [synthesize(s, BackEraseConfig(foreground_scale=1.0), np.random.default_rng(k)) for k, s in enumerate(real)]

det = build_detector(DetectorConfig(num_classes=3, category_ids=(1, 2, 3)), dtype=torch.float64)
losses, _ = compute_step_losses(det, real, synth, TrainMode("decoupled"))
print("loss terms:", ", ".join(f"{k}={float(v.detach()):.3f}" for k, v in losses.items()))


def grad_norms(loss):
    det.zero_grad(set_to_none=True)
    loss.backward(retain_graph=True)
    out = {}
    for group in ("backbone", "rpn", "box_head", "mask_head"):
        gs = [p.grad for p in det.parameter_group(group).values() if p.grad is not None]
        out[group] = float(torch.sqrt(sum((g ** 2).sum() for g in gs))) if gs else 0.0
    return out


real_part = sum(v for k, v in losses.items() if k.startswith("real/"))
synth_part = sum(v for k, v in losses.items() if k.startswith("synth/"))
print(f"\n{'group':10s} {'from real':>12s} {'from synth':>12s}")
r, s = grad_norms(real_part), grad_norms(synth_part)
for g in r:
    print(f"{g:10s} {r[g]:12.3e} {s[g]:12.3e}")
