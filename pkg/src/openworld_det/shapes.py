"""Toy open-world dataset: flat-colored shapes on smooth textured backgrounds.

Categories 1-3 (square, disk, triangle) are the seen classes; category 4
(ring) plays the hidden object. Every image contains at least one seen shape
and, with probability ``hidden_prob``, one or more rings, so training images
carry unannotated objects once the split drops the ring annotations.
"""
from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import CategorySplit, Dataset, InstanceAnnotation, rle_encode

CATEGORIES = {1: "square", 2: "disk", 3: "triangle", 4: "ring"}
SEEN = (1, 2, 3)
HIDDEN = (4,)
SPLIT = CategorySplit(SEEN, HIDDEN)


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    if kind == 1:
        m = np.ones((size, size), dtype=bool)
    elif kind == 2:
        m = (xx - c) ** 2 + (yy - c) ** 2 <= c ** 2
    elif kind == 3:
        # apex on top, base at the bottom row
        m = np.abs(xx - c) <= yy / 2
    else:
        r2 = (xx - c) ** 2 + (yy - c) ** 2
        m = (r2 <= c ** 2) & (r2 >= (0.5 * c) ** 2)
    return m


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(size=(h, w, 3))
    smooth = ndimage.gaussian_filter(noise, (6, 6, 0), mode="wrap")
    smooth = smooth / (np.abs(smooth).max() + 1e-9)
    base = rng.uniform(0.25, 0.75, size=3)
    fine = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), (0.7, 0.7, 0)) * 0.04
    return np.clip(base + 0.2 * smooth + fine, 0, 1)


def make_image(rng: np.random.Generator, size: int = 64, n_seen=(1, 3), n_hidden=(1, 2),
               hidden_prob: float = 0.8, min_size: int = 12, max_size: int = 24):
    """One image and its ``(category_id, mask)`` instances, all categories included."""
    img = _background(size, size, rng)
    occupied = np.zeros((size, size), dtype=bool)
    kinds = [int(rng.choice(SEEN)) for _ in range(rng.integers(n_seen[0], n_seen[1] + 1))]
    if rng.random() < hidden_prob:
        kinds += [HIDDEN[0]] * int(rng.integers(n_hidden[0], n_hidden[1] + 1))
    rng.shuffle(kinds)
    objs = []
    for kind in kinds:
        for _ in range(30):
            s = int(rng.integers(min_size, max_size + 1))
            x = int(rng.integers(0, size - s + 1))
            y = int(rng.integers(0, size - s + 1))
            region = occupied[max(y - 1, 0):y + s + 1, max(x - 1, 0):x + s + 1]
            if not region.any():
                break
        else:
            continue
        local = _shape_mask(kind, s, rng)
        mask = np.zeros((size, size), dtype=bool)
        mask[y:y + s, x:x + s] = local
        occupied[y:y + s, x:x + s] = True
        # keep objects well separated from the local background tone
        color = rng.uniform(0, 1, size=3)
        while np.abs(color - img[mask].mean(0)).max() < 0.35:
            color = rng.uniform(0, 1, size=3)
        img[mask] = color
        objs.append((kind, mask))
    return img, objs


def _box_of(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1 - xs.min()), float(ys.max() + 1 - ys.min()))


def make_dataset(n_images: int, seed: int, size: int = 64, first_image_id: int = 1, **kw) -> Dataset:
    """In-memory dataset with every instance annotated (apply a split to hide rings)."""
    rng = np.random.default_rng(seed)
    images, anns, ids = [], [], []
    ann_id = 1
    for k in range(n_images):
        img, objs = make_image(rng, size, **kw)
        a = []
        for kind, mask in objs:
            a.append(InstanceAnnotation(ann_id, _box_of(mask), mask.astype(np.uint8), kind))
            ann_id += 1
        images.append(img)
        anns.append(a)
        ids.append(first_image_id + k)
    return Dataset.from_arrays(images, anns, ids, categories=CATEGORIES)


def write_dataset(dataset: Dataset, root: str, annotation_name: str = "annotations.json") -> str:
    """Write PNG images and a COCO JSON (RLE masks) under ``root``; returns the JSON path."""
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    images, anns = [], []
    for s in dataset:
        fname = f"{s.image_id:06d}.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(os.path.join(img_dir, fname))
        images.append({"id": s.image_id, "file_name": fname, "height": s.height, "width": s.width})
        for a in s.annotations:
            m = a.mask(s.height, s.width)
            anns.append({"id": a.id, "image_id": s.image_id, "category_id": a.category_id,
                         "bbox": list(a.box), "segmentation": rle_encode(m), "area": float(m.sum()),
                         "iscrowd": 0})
    cats = [{"id": k, "name": v} for k, v in CATEGORIES.items()]
    path = os.path.join(root, annotation_name)
    with open(path, "w") as f:
        json.dump({"images": images, "annotations": anns, "categories": cats}, f, sort_keys=True)
    return path
