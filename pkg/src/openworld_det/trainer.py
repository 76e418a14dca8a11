"""Training loop with the four data/loss routing variants.

========== ==================================== ====================
variant    detection losses (rpn_*, roi_*)      mask loss
========== ==================================== ====================
plain_real real images                          real images
synth_only synthesized images                   synthesized images
combined   real + synthesized                   real + synthesized
decoupled  synthesized images                   real images
========== ==================================== ====================

The backbone is shared, so in ``decoupled`` mode it receives gradient from
both domains while each head only sees its own domain.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .annotations import Dataset, drop_images_without_annotations
from .backerase import BackEraseConfig, synthesize
from .detector import (Detector, GtTargets, LossReport, NonFiniteLossError, compute_losses,
                       save_checkpoint, xywh_to_xyxy)
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

VARIANTS = ("plain_real", "synth_only", "combined", "decoupled")

# domain -> loss parts, per variant
ROUTING = {
    "plain_real": {"real": ("det", "mask")},
    "synth_only": {"synth": ("det", "mask")},
    "combined": {"real": ("det", "mask"), "synth": ("det", "mask")},
    "decoupled": {"synth": ("det",), "real": ("mask",)},
}


@dataclass(frozen=True)
class TrainMode:
    variant: str = "decoupled"
    ioa_sampling: bool = False
    pseudo_labeling: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if (self.ioa_sampling or self.pseudo_labeling) and self.variant != "plain_real":
            raise ValueError("baseline flags (ioa_sampling, pseudo_labeling) require variant plain_real")

    @property
    def routing(self) -> dict:
        return ROUTING[self.variant]

    def configure(self, config):
        return replace(config, sampling_mode="ioa" if self.ioa_sampling else "standard",
                       pseudo_label=self.pseudo_labeling)


@dataclass(frozen=True)
class Schedule:
    iterations: int = 500
    lr: float = 0.01
    seed: int = 0
    batch_size: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 0
    log_wallclock: bool = False
    # add the per-image sampling trace (IoA of bg regions, pseudo-label probs) to each record
    log_traces: bool = False
    # images without annotations are dropped unless this is set
    keep_unannotated: bool = False


def prepare_batch(samples, detector: Detector, dtype=None):
    """Pad images into one tensor and convert annotations to class-index targets."""
    cfg = detector.config
    dtype = dtype or next(detector.parameters()).dtype
    H = max(s.image.shape[0] for s in samples)
    W = max(s.image.shape[1] for s in samples)
    C = samples[0].image.shape[2]
    arr = np.zeros((len(samples), C, H, W))
    gts, sizes = [], []
    for i, s in enumerate(samples):
        h, w = s.image.shape[:2]
        arr[i, :, :h, :w] = s.image.transpose(2, 0, 1)
        sizes.append((h, w))
        anns = s.annotations
        boxes = xywh_to_xyxy([a.box for a in anns]) if anns else np.zeros((0, 4))
        classes = np.array([cfg.class_index(a.category_id) for a in anns], dtype=np.int64)
        masks = np.stack([a.mask(h, w) for a in anns]) if anns else np.zeros((0, h, w), dtype=np.uint8)
        gts.append(GtTargets(boxes, classes, masks))
    return torch.as_tensor(arr, dtype=dtype), gts, sizes


def _rngs(seed: int, domain: str, n: int) -> list:
    return [(derive_rng(seed, domain, i, "rpn"), derive_rng(seed, domain, i, "roi")) for i in range(n)]


def compute_step_losses(detector: Detector, real_batch, synth_batch, mode: TrainMode, seed: int = 0,
                        plans: dict | None = None):
    """Loss tensors keyed ``"<domain>/<name>"`` plus the plans used to compute them."""
    routing = mode.routing
    batches = {"real": list(real_batch or []), "synth": list(synth_batch or [])}
    for domain in routing:
        if not batches[domain]:
            raise ValueError(f"mode {mode.variant} needs a non-empty {domain} batch")
    plans = dict(plans or {})
    out = {}
    for domain, parts in routing.items():
        images, gts, sizes = prepare_batch(batches[domain], detector)
        losses, plans[domain] = compute_losses(
            detector, images, gts, _rngs(seed, domain, len(gts)), parts=parts,
            plan=plans.get(domain), image_sizes=sizes)
        for k, v in losses.items():
            out[f"{domain}/{k}"] = v
    return out, plans


def training_step(detector: Detector, real_batch, synth_batch, mode: TrainMode,
                  optimizer: torch.optim.Optimizer, seed: int = 0) -> LossReport:
    """One optimizer update; returns the losses and the sampling trace."""
    wanted = mode.configure(detector.config)
    if wanted != detector.config:
        detector.config = wanted
    detector.train()
    optimizer.zero_grad(set_to_none=False)
    losses, plans = compute_step_losses(detector, real_batch, synth_batch, mode, seed)
    total = sum(losses.values())
    if total.requires_grad:
        total.backward()
    for p in detector.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    optimizer.step()
    trace = {domain: [p.trace for p in plan.images] for domain, plan in plans.items()}
    return LossReport({k: float(v.detach()) for k, v in losses.items()}, float(total.detach()), trace)


def make_optimizer(detector: Detector, schedule: Schedule) -> torch.optim.Optimizer:
    return torch.optim.SGD(detector.parameters(), lr=schedule.lr, momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)


def _batch_indices(n: int, step: int, batch_size: int, seed: int) -> list:
    # walk through a fresh permutation per epoch
    out = []
    for j in range(batch_size):
        pos = step * batch_size + j
        epoch, k = divmod(pos, n)
        out.append(int(derive_rng(seed, "order", epoch).permutation(n)[k]))
    return out


@dataclass
class TrainResult:
    metrics: list
    checkpoint: str | None = None


def train(detector: Detector, dataset: Dataset, backerase_config: BackEraseConfig, mode: TrainMode,
          schedule: Schedule, log_path=None, checkpoint_path=None, eval_fn=None) -> TrainResult:
    """Run ``schedule.iterations`` training steps.

    Synthesized counterparts are generated on the fly with a seed derived from
    ``(schedule.seed, step, image_id)``. ``eval_fn(detector)`` is called every
    ``schedule.eval_every`` steps and its (JSON-serializable) result logged.
    """
    data = dataset if schedule.keep_unannotated else drop_images_without_annotations(dataset)
    if len(data) == 0:
        raise ValueError("no training images left after filtering")
    needs_synth = "synth" in mode.routing
    detector.config = mode.configure(detector.config)
    optimizer = make_optimizer(detector, schedule)
    metrics = []
    log_file = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(schedule.iterations):
            idx = _batch_indices(len(data), step, schedule.batch_size, schedule.seed)
            real = [data[i] for i in idx]
            synth = []
            if needs_synth:
                synth = [synthesize(s, backerase_config, derive_rng(schedule.seed, "backerase", step, s.image_id))
                         for s in real if s.annotations]
            try:
                report = training_step(detector, real, synth, mode, optimizer,
                                       seed=derive_seed(schedule.seed, "step", step))
            except NonFiniteLossError as e:
                raise NonFiniteLossError(e.key, step) from None
            record = {"step": step, "losses": report.losses, "total": report.total, "lr": schedule.lr,
                      "wallclock": round(time.perf_counter() - t0, 3) if schedule.log_wallclock else None}
            if schedule.log_traces:
                record["trace"] = report.trace
            if eval_fn is not None and schedule.eval_every and (step + 1) % schedule.eval_every == 0:
                record["eval"] = eval_fn(detector)
            metrics.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if step % 50 == 0:
                log.info("step %d total %.4f", step, report.total)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, detector, extra={"mode": mode.__dict__, "iterations": schedule.iterations})
    return TrainResult(metrics, str(checkpoint_path) if checkpoint_path else None)


def mean_total(metrics: list, start: int, stop: int) -> float:
    return float(np.mean([m["total"] for m in metrics[start:stop]]))

