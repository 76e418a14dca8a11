from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torchvision.ops import nms as _nms_kernel
from torchvision.ops import roi_align

from .boxes import clip_boxes, decode_deltas

SAMPLING_MODES = ("standard", "ioa")

RPN_DELTA_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_DELTA_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """Plain conv stack: one 3x3 conv + ReLU per block."""

    channels: tuple = (16, 32, 32, 64)
    strides: tuple = (1, 2, 2, 1)
    in_channels: int = 3

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    # dataset category id of each foreground class, in class-index order (1..K)
    category_ids: tuple | None = None
    anchor_sizes: tuple = (8, 16, 32)
    anchor_aspect_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    sampling_mode: str = "standard"
    ioa_threshold: float = 0.7
    pseudo_label: bool = False
    pseudo_threshold: float = 0.9
    rpn_pre_nms_topk: int = 1000
    rpn_post_nms_topk: int = 300
    rpn_nms_threshold: float = 0.7
    roi_pool_size: int = 7
    mask_resolution: int = 14
    head_dim: int = 128
    smooth_l1_beta: float = 1 / 9
    param_seed: int = 0

    def __post_init__(self):
        if self.category_ids is None:
            object.__setattr__(self, "category_ids", tuple(range(1, self.num_classes + 1)))
        else:
            object.__setattr__(self, "category_ids", tuple(int(c) for c in self.category_ids))
        errors = []
        if self.num_classes < 1:
            errors.append("num_classes must be >= 1")
        if len(self.category_ids) != self.num_classes:
            errors.append("category_ids must list one id per class")
        for name in ("rpn_fg_iou", "rpn_bg_iou", "roi_fg_iou", "ioa_threshold", "pseudo_threshold",
                     "rpn_pos_fraction", "roi_pos_fraction", "rpn_nms_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must be in [0, 1]")
        if self.rpn_bg_iou > self.rpn_fg_iou:
            errors.append("rpn_bg_iou must not exceed rpn_fg_iou")
        if self.sampling_mode not in SAMPLING_MODES:
            errors.append(f"sampling_mode must be one of {SAMPLING_MODES}")
        if not self.anchor_sizes or not self.anchor_aspect_ratios:
            errors.append("anchor_sizes and anchor_aspect_ratios must be non-empty")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_aspect_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def class_index(self, category_id: int) -> int:
        """1-based class index of a dataset category id."""
        try:
            return self.category_ids.index(int(category_id)) + 1
        except ValueError:
            raise KeyError(f"category {category_id} is not a detector class") from None


class HeadOutputs(NamedTuple):
    class_logits: torch.Tensor  # (R, K+1), background first
    box_deltas: torch.Tensor  # (R, 4K)
    mask_logits: torch.Tensor | None  # (R, K, M, M)


@dataclass
class Proposals:
    boxes: np.ndarray  # (P, 4) xyxy
    logits: np.ndarray  # (P,)
    image_size: tuple = field(default=(0, 0))

    def __len__(self) -> int:
        return len(self.boxes)


def make_anchors(feat_h: int, feat_w: int, stride: int, sizes, ratios) -> np.ndarray:
    """Anchors centered on each feature cell; order is (y, x, anchor)."""
    base = []
    for size in sizes:
        for r in ratios:
            w = size / np.sqrt(r)
            h = size * np.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = np.asarray(base)
    cx = (np.arange(feat_w) + 0.5) * stride
    cy = (np.arange(feat_h) + 0.5) * stride
    shift = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)
    shift = np.concatenate([shift, shift], axis=1)
    return (shift[:, None, :] + base[None, :, :]).reshape(-1, 4)


class Detector(nn.Module):
    """Backbone -> RPN -> box head + mask head, with a single feature level."""

    def __init__(self, config: DetectorConfig, backbone_spec: BackboneSpec | None = None):
        super().__init__()
        spec = backbone_spec or BackboneSpec()
        self.config = config
        self.backbone_spec = spec
        self.stride = spec.stride

        layers = []
        c_in = spec.in_channels
        for c, s in zip(spec.channels, spec.strides):
            layers += [nn.Conv2d(c_in, c, 3, stride=s, padding=1), nn.ReLU()]
            c_in = c
        self.backbone = nn.Sequential(*layers)
        C = c_in
        A = config.num_anchors
        K = config.num_classes

        self.rpn_conv = nn.Conv2d(C, C, 3, padding=1)
        self.rpn_logits = nn.Conv2d(C, A, 1)
        self.rpn_deltas = nn.Conv2d(C, 4 * A, 1)

        P = config.roi_pool_size
        self.box_fc1 = nn.Linear(C * P * P, config.head_dim)
        self.box_fc2 = nn.Linear(config.head_dim, config.head_dim)
        self.cls_score = nn.Linear(config.head_dim, K + 1)
        self.bbox_pred = nn.Linear(config.head_dim, 4 * K)

        self.mask_conv1 = nn.Conv2d(C, 32, 3, padding=1)
        self.mask_conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.mask_pred = nn.Conv2d(32, K, 1)

        self._init_params(config.param_seed)

    # parameter groups, used for gradient routing checks
    HEAD_PREFIXES = {
        "backbone": ("backbone.",),
        "rpn": ("rpn_",),
        "box_head": ("box_fc", "cls_score", "bbox_pred"),
        "mask_head": ("mask_",),
    }

    def parameter_group(self, group: str) -> dict:
        prefixes = self.HEAD_PREFIXES[group]
        return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}

    def _init_params(self, seed: int):
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, m in self.named_modules():
                if not isinstance(m, (nn.Conv2d, nn.Linear)):
                    continue
                if name in ("rpn_logits", "rpn_deltas", "cls_score"):
                    std = 0.01
                elif name == "bbox_pred":
                    std = 0.001
                else:
                    fan_in = m.weight[0].numel()
                    std = float(np.sqrt(2.0 / fan_in))
                m.weight.normal_(0.0, std, generator=g)
                m.bias.zero_()

    # -- forward pieces ------------------------------------------------------

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def rpn_forward(self, feats: torch.Tensor):
        """Per-image anchor logits ``(N, H*W*A)`` and deltas ``(N, H*W*A, 4)``."""
        h = torch.relu(self.rpn_conv(feats))
        n = feats.shape[0]
        logits = self.rpn_logits(h).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.rpn_deltas(h).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return logits, deltas

    def anchors(self, feats: torch.Tensor) -> np.ndarray:
        return make_anchors(feats.shape[2], feats.shape[3], self.stride,
                            self.config.anchor_sizes, self.config.anchor_aspect_ratios)

    def propose(self, feats: torch.Tensor, image_sizes, pre_nms_topk: int | None = None,
                post_nms_topk: int | None = None, nms_threshold: float | None = None,
                rpn_out=None) -> list:
        """Decode, clip, NMS and cap anchor predictions. No gradient flows."""
        cfg = self.config
        pre = cfg.rpn_pre_nms_topk if pre_nms_topk is None else pre_nms_topk
        post = cfg.rpn_post_nms_topk if post_nms_topk is None else post_nms_topk
        thr = cfg.rpn_nms_threshold if nms_threshold is None else nms_threshold
        if rpn_out is None:
            with torch.no_grad():
                rpn_out = self.rpn_forward(feats)
        logits, deltas = (t.detach().double().cpu().numpy() for t in rpn_out)
        anchors = self.anchors(feats)
        out = []
        for i, (h, w) in enumerate(image_sizes):
            order = np.argsort(-logits[i], kind="stable")[:pre]
            boxes = decode_deltas(anchors[order], deltas[i][order], RPN_DELTA_WEIGHTS)
            boxes = clip_boxes(boxes, h, w)
            ok = ((boxes[:, 2] - boxes[:, 0]) >= 1) & ((boxes[:, 3] - boxes[:, 1]) >= 1)
            boxes, scores = boxes[ok], logits[i][order][ok]
            keep = _nms_kernel(torch.as_tensor(boxes), torch.as_tensor(scores), thr).numpy()[:post]
            out.append(Proposals(boxes[keep], scores[keep], (h, w)))
        return out

    def _pool(self, feats: torch.Tensor, boxes: list, size: int) -> torch.Tensor:
        rois = []
        for i, b in enumerate(boxes):
            b = torch.as_tensor(np.asarray(b, dtype=np.float64).reshape(-1, 4), dtype=feats.dtype)
            rois.append(torch.cat([torch.full((len(b), 1), float(i), dtype=feats.dtype), b], dim=1))
        rois = torch.cat(rois, dim=0) if rois else torch.zeros((0, 5), dtype=feats.dtype)
        return roi_align(feats, rois, output_size=size, spatial_scale=1.0 / self.stride,
                         sampling_ratio=2, aligned=True)

    def box_head(self, feats: torch.Tensor, boxes: list):
        x = self._pool(feats, boxes, self.config.roi_pool_size).flatten(1)
        x = torch.relu(self.box_fc1(x))
        x = torch.relu(self.box_fc2(x))
        return self.cls_score(x), self.bbox_pred(x)

    def mask_head(self, feats: torch.Tensor, boxes: list) -> torch.Tensor:
        x = self._pool(feats, boxes, self.config.mask_resolution)
        x = torch.relu(self.mask_conv1(x))
        x = torch.relu(self.mask_conv2(x))
        return self.mask_pred(x)

    def roi_forward(self, feats: torch.Tensor, boxes: list, with_masks: bool = True) -> HeadOutputs:
        """``boxes`` is one ``(R_i, 4)`` xyxy array per image in the batch."""
        logits, deltas = self.box_head(feats, boxes)
        masks = self.mask_head(feats, boxes) if with_masks else None
        return HeadOutputs(logits, deltas, masks)

    def forward(self, images: torch.Tensor):
        feats = self.features(images)
        sizes = [tuple(images.shape[2:])] * images.shape[0]
        props = self.propose(feats, sizes)
        return props, self.roi_forward(feats, [p.boxes for p in props])

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())


def build_detector(config: DetectorConfig, backbone_spec: BackboneSpec | None = None,
                   dtype: torch.dtype = torch.float32) -> Detector:
    spec = backbone_spec or BackboneSpec()
    if len(spec.channels) != len(spec.strides):
        raise ConfigError("backbone channels and strides must have equal length")
    if any(s not in (1, 2) for s in spec.strides):
        raise ConfigError("backbone strides must be 1 or 2")
    stride = spec.stride
    if min(config.anchor_sizes) < stride:
        raise ConfigError(
            f"smallest anchor ({min(config.anchor_sizes)} px) is below the backbone stride ({stride} px)")
    return Detector(config, spec).to(dtype)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(H, W, C)`` arrays in [0, 1] into an ``(N, C, H, W)`` tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.as_tensor(arr.transpose(0, 3, 1, 2).copy(), dtype=dtype)
