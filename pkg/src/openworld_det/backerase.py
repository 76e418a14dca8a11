"""Background-erasing copy-paste augmentation.

A synthesized image keeps the annotated objects of the source image and
replaces everything else with a small patch of the same (smoothed) image,
upscaled to full size. Foreground and background go through the same
down/up resampling so that the two regions share their frequency content::

    smoothed = gaussian(image)
    canvas   = upscale(crop(smoothed, scale))
    fg       = upscale(downsample(smoothed, scale))
    out      = smooth(fg * M + canvas * (1 - M))

where ``M`` is the Gaussian-smoothed union of the instance masks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .annotations import ImageSample

BACKGROUND_SOURCES = ("self_patch", "external_corpus")
RESAMPLE_KERNELS = ("bilinear", "nearest")


class NoAnnotationsError(ValueError):
    """Raised when asked to synthesize from an image that has nothing to paste."""


@dataclass(frozen=True)
class BackEraseConfig:
    scale: float = 1 / 8
    pre_smooth_sigma: float = 1.0
    mask_smooth_sigma: float = 2.0
    post_smooth_sigma: float = 1.0
    background_source: str = "self_patch"
    external_patch_size: int = 256
    max_crop_retries: int = 20
    # fraction of the crop allowed to overlap ground-truth masks
    overlap_budget: float = 0.0
    resample: str = "bilinear"
    # None: band-limit the foreground with ``scale`` like the background
    foreground_scale: float | None = None
    allow_empty: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ValueError(f"scale must be in (0, 1], got {self.scale}")
        if self.foreground_scale is not None and not 0 < self.foreground_scale <= 1:
            raise ValueError(f"foreground_scale must be in (0, 1], got {self.foreground_scale}")
        for name in ("pre_smooth_sigma", "mask_smooth_sigma", "post_smooth_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.external_patch_size <= 0:
            raise ValueError("external_patch_size must be positive")
        if self.max_crop_retries < 0:
            raise ValueError("max_crop_retries must be >= 0")
        if self.background_source not in BACKGROUND_SOURCES:
            raise ValueError(f"background_source must be one of {BACKGROUND_SOURCES}")
        if self.resample not in RESAMPLE_KERNELS:
            raise ValueError(f"resample must be one of {RESAMPLE_KERNELS}")


@dataclass(frozen=True)
class SynthesizedSample:
    image_id: int
    image: np.ndarray
    annotations: tuple
    union_mask: np.ndarray
    background_rect: tuple  # (x, y, w, h); for external backgrounds, within the corpus image
    source_id: int
    corpus_index: int | None = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# -- filtering and resampling ------------------------------------------------

def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes, clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image
    sig = (sigma, sigma) + (0,) * (image.ndim - 2)
    out = ndimage.gaussian_filter(image, sig, mode="reflect", truncate=4.0)
    return np.clip(out, 0.0, 1.0)


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, edge clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] += 1 - frac
    w[np.arange(n_out), hi] += frac
    return w


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    # exact overlap of output cell [i, i+1) * n_in/n_out with each input pixel
    step = n_in / n_out
    starts = np.arange(n_out) * step
    ends = starts + step
    left = np.arange(n_in)
    overlap = np.clip(np.minimum(ends[:, None], left[None, :] + 1)
                      - np.maximum(starts[:, None], left[None, :]), 0, None)
    return overlap / step


def _nearest_weights(n_in: int, n_out: int) -> np.ndarray:
    idx = np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), idx] = 1.0
    return w


def resize(image: np.ndarray, height: int, width: int, kernel: str = "bilinear") -> np.ndarray:
    """Resize ``(H, W[, C])`` to ``(height, width[, C])``.

    ``kernel`` is ``bilinear``, ``nearest`` or ``area`` (box average, for
    shrinking).
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()
    make = {"bilinear": _linear_weights, "nearest": _nearest_weights, "area": _area_weights}[kernel]
    wy = make(h, height)
    wx = make(w, width)
    rows = (wy @ image.reshape(h, -1)).reshape(height, w, -1)
    return np.matmul(wx, rows).reshape((height, width) + image.shape[2:])


def rescale(image: np.ndarray, height: int, width: int, up_kernel: str = "bilinear") -> np.ndarray:
    """Resize with the area kernel along axes that shrink and ``up_kernel`` along axes that grow."""
    h, w = image.shape[:2]
    image = resize(image, height, w, "area" if height < h else up_kernel)
    return resize(image, height, width, "area" if width < w else up_kernel)


def _crop_size(height: int, width: int, scale: float) -> tuple:
    return math.floor(scale * height), math.floor(scale * width)


def band_limit(image: np.ndarray, scale: float, kernel: str = "bilinear") -> np.ndarray:
    """Area-average downsample by ``scale``, then upscale back with ``kernel``."""
    h, w = image.shape[:2]
    sh, sw = _crop_size(h, w, scale)
    if sh < 1 or sw < 1:
        raise ValueError(f"image {w}x{h} too small for scale {scale}")
    return resize(resize(image, sh, sw, "area"), h, w, kernel)


# -- background sampling -----------------------------------------------------

def sample_background_patch(sample: ImageSample, config: BackEraseConfig, rng: np.random.Generator,
                            image: np.ndarray | None = None, union_mask: np.ndarray | None = None):
    """Pick a ``floor(scale*H) x floor(scale*W)`` crop avoiding annotated pixels.

    ``image`` is the pre-smoothed image to crop from (computed when omitted).
    Returns ``(patch, (x, y, w, h))``. If no attempt meets the overlap budget
    the attempt with the smallest overlap is used.
    """
    H, W = sample.height, sample.width
    ch, cw = _crop_size(H, W, config.scale)
    if ch < 1 or cw < 1:
        raise ValueError(f"image {W}x{H} is smaller than 1/scale = {1 / config.scale:g} in some dimension")
    if image is None:
        image = gaussian_smooth(sample.image, config.pre_smooth_sigma)
    if union_mask is None:
        union_mask = sample.union_mask()
    integral = np.pad(union_mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    budget = config.overlap_budget * ch * cw

    best = None
    for _ in range(config.max_crop_retries + 1):
        x = int(rng.integers(0, W - cw + 1))
        y = int(rng.integers(0, H - ch + 1))
        overlap = (integral[y + ch, x + cw] - integral[y, x + cw]
                   - integral[y + ch, x] + integral[y, x])
        if best is None or overlap < best[0]:
            best = (overlap, x, y)
        if overlap <= budget:
            break
    _, x, y = best
    return image[y:y + ch, x:x + cw].copy(), (x, y, cw, ch)


def soft_union_mask(sample: ImageSample, sigma: float) -> np.ndarray:
    hard = sample.union_mask().astype(np.float64)
    return gaussian_smooth(hard, sigma) if sigma > 0 else hard


def blend(foreground: np.ndarray, background: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask[..., None] if foreground.ndim == 3 else mask
    return foreground * m + background * (1.0 - m)


def _check_annotations(sample: ImageSample, config: BackEraseConfig):
    if not sample.annotations and not config.allow_empty:
        raise NoAnnotationsError(
            f"image {sample.image_id} has no annotations; skip it or set allow_empty=True")


def _finish(sample, config, smoothed, canvas, union_mask, rect, corpus_index=None):
    fg = band_limit(smoothed, config.foreground_scale or config.scale, config.resample)
    out = blend(fg, canvas, union_mask)
    out = np.clip(gaussian_smooth(out, config.post_smooth_sigma), 0.0, 1.0)
    return SynthesizedSample(sample.image_id, out, sample.annotations, union_mask, rect,
                             sample.image_id, corpus_index)


def synthesize(sample: ImageSample, config: BackEraseConfig, rng: np.random.Generator,
               union_mask: np.ndarray | None = None) -> SynthesizedSample:
    """Erase the background of ``sample`` and paste its annotated objects back.

    ``union_mask`` overrides the soft blending mask (for testing the blend).
    """
    _check_annotations(sample, config)
    H, W = sample.height, sample.width
    smoothed = gaussian_smooth(sample.image, config.pre_smooth_sigma)
    patch, rect = sample_background_patch(sample, config, rng, image=smoothed)
    canvas = resize(patch, H, W, config.resample)
    if union_mask is None:
        union_mask = soft_union_mask(sample, config.mask_smooth_sigma)
    return _finish(sample, config, smoothed, canvas, np.clip(union_mask, 0.0, 1.0), rect)


def synthesize_external(sample: ImageSample, corpus, config: BackEraseConfig, rng: np.random.Generator,
                        union_mask: np.ndarray | None = None) -> SynthesizedSample:
    """Like :func:`synthesize`, with the canvas cut from an external image corpus.

    A ``external_patch_size`` square is cropped from a random corpus image
    and rescaled to the sample size. Corpus images smaller than the patch are
    skipped.
    """
    _check_annotations(sample, config)
    if len(corpus) == 0:
        raise ValueError("background corpus is empty")
    p = config.external_patch_size
    usable = [i for i, im in enumerate(corpus) if im.shape[0] >= p and im.shape[1] >= p]
    if not usable:
        raise ValueError(f"no corpus image is at least {p}x{p}")
    idx = usable[int(rng.integers(0, len(usable)))]
    src = np.asarray(corpus[idx], dtype=np.float64)
    if src.ndim == 2:
        src = src[..., None]
    x = int(rng.integers(0, src.shape[1] - p + 1))
    y = int(rng.integers(0, src.shape[0] - p + 1))
    patch = src[y:y + p, x:x + p]
    if patch.shape[2] != sample.image.shape[2]:
        patch = np.broadcast_to(patch.mean(axis=2, keepdims=True), (p, p, sample.image.shape[2]))
    H, W = sample.height, sample.width
    canvas = rescale(patch, H, W, config.resample)
    smoothed = gaussian_smooth(sample.image, config.pre_smooth_sigma)
    if union_mask is None:
        union_mask = soft_union_mask(sample, config.mask_smooth_sigma)
    return _finish(sample, config, smoothed, canvas, np.clip(union_mask, 0.0, 1.0), (x, y, p, p), idx)
