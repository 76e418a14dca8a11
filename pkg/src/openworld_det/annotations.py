"""COCO-style dataset ingestion, mask rasterization and seen/unseen category splits.

Polygons are filled with the even-odd rule, sampling each pixel at its
center ``(col + 0.5, row + 0.5)``. A segmentation made of several polygons is
the union of the individually filled polygons.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Any, Iterator, Sequence

import numpy as np
from PIL import Image

FOREGROUND_ID = 1

SPLIT_MODES = ("train_seen_only", "eval_unseen_only", "all")


class CocoFormatError(ValueError):
    """Raised when an annotation file does not follow the expected COCO layout."""


class MissingImageError(FileNotFoundError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class CategorySplit:
    seen_ids: frozenset
    unseen_ids: frozenset

    def __post_init__(self):
        object.__setattr__(self, "seen_ids", frozenset(int(c) for c in self.seen_ids))
        object.__setattr__(self, "unseen_ids", frozenset(int(c) for c in self.unseen_ids))
        both = self.seen_ids & self.unseen_ids
        if both:
            raise ValueError(f"categories listed as both seen and unseen: {sorted(both)}")

    def complement(self) -> "CategorySplit":
        return CategorySplit(self.unseen_ids, self.seen_ids)

    def covers(self, category_id: int) -> bool:
        return category_id in self.seen_ids or category_id in self.unseen_ids


@dataclass(frozen=True)
class InstanceAnnotation:
    """One annotated instance.

    ``box`` is ``(x, y, width, height)`` in pixels. ``segmentation`` is either
    a COCO polygon list, a COCO RLE dict, or an already rasterized ``(H, W)``
    array.
    """

    id: int
    box: tuple
    segmentation: Any
    category_id: int
    is_seen: bool | None = None

    def mask(self, height: int, width: int) -> np.ndarray:
        return rasterize_mask(self, height, width)

    def payload(self) -> tuple:
        """Hashable-free comparison key used to check annotations are untouched."""
        seg = self.segmentation
        if isinstance(seg, np.ndarray):
            seg = ("array", seg.shape, seg.tobytes())
        else:
            seg = json.dumps(seg, sort_keys=True)
        return (self.id, tuple(self.box), seg, self.category_id, self.is_seen)


@dataclass(frozen=True)
class ImageSample:
    image_id: int
    image: np.ndarray
    annotations: tuple = ()
    # annotations removed by a split; kept so evaluation can tag seen-class boxes
    excluded: tuple = ()

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def union_mask(self) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        for ann in self.annotations:
            out |= ann.mask(self.height, self.width).astype(bool)
        return out


@dataclass(frozen=True)
class _ImageRecord:
    image_id: int
    height: int
    width: int
    source: Any  # file path or in-memory array
    annotations: tuple
    excluded: tuple = ()


class Dataset:
    """Immutable, lazily loaded sequence of :class:`ImageSample`.

    Image pixels are read on item access. Views produced by :func:`apply_split`
    and :func:`to_class_agnostic` share the underlying image sources.
    """

    def __init__(self, records: Sequence[_ImageRecord], categories: dict | None = None,
                 original_category_ids: dict | None = None):
        self._records = tuple(records)
        self.categories = dict(categories or {})
        self.original_category_ids = dict(original_category_ids or {})

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, index: int) -> ImageSample:
        rec = self._records[index]
        return ImageSample(rec.image_id, _load_image(rec), rec.annotations, rec.excluded)

    def __iter__(self) -> Iterator[ImageSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_ids(self) -> list:
        return [r.image_id for r in self._records]

    def image_size(self, index: int) -> tuple:
        rec = self._records[index]
        return rec.height, rec.width

    def annotations(self, index: int) -> tuple:
        return self._records[index].annotations

    def excluded(self, index: int) -> tuple:
        return self._records[index].excluded

    def all_annotations(self) -> list:
        return [a for r in self._records for a in r.annotations]

    def category_ids(self) -> set:
        return {a.category_id for r in self._records for a in (*r.annotations, *r.excluded)}

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self._records[i] for i in indices], self.categories,
                       self.original_category_ids)

    def _with_records(self, records, **kw) -> "Dataset":
        kw.setdefault("categories", self.categories)
        kw.setdefault("original_category_ids", self.original_category_ids)
        return Dataset(records, **kw)

    @classmethod
    def from_arrays(cls, images: Sequence[np.ndarray], annotations: Sequence[Sequence[InstanceAnnotation]],
                    image_ids: Sequence[int] | None = None, categories: dict | None = None) -> "Dataset":
        """Build an in-memory dataset (used by the synthetic fixtures and tests)."""
        if image_ids is None:
            image_ids = range(1, len(images) + 1)
        records = []
        for img, anns, iid in zip(images, annotations, image_ids):
            img = np.asarray(img, dtype=np.float64)
            if img.ndim == 2:
                img = img[..., None]
            records.append(_ImageRecord(int(iid), img.shape[0], img.shape[1], img, tuple(anns)))
        return cls(records, categories)


def _load_image(rec: _ImageRecord) -> np.ndarray:
    if isinstance(rec.source, np.ndarray):
        return rec.source
    with Image.open(rec.source) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float64) / 65535.0
    elif arr.dtype == bool:
        arr = arr.astype(np.float64)
    else:
        arr = arr.astype(np.float64)
        if arr.max(initial=0.0) > 1.0:
            arr = arr / arr.max()
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 4:
        arr = arr[..., :3]
    if arr.shape[:2] != (rec.height, rec.width):
        raise CocoFormatError(
            f"image_id {rec.image_id}: file is {arr.shape[1]}x{arr.shape[0]}, "
            f"annotation file says {rec.width}x{rec.height}")
    return arr


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise CocoFormatError(f"missing key '{key}' in {where}")
    return obj[key]


def load_coco(annotation_path: str | os.PathLike, image_root: str | os.PathLike) -> Dataset:
    """Read a COCO-style annotation file.

    Images without annotations are kept. Boxes are clipped to the image.
    ``iscrowd`` annotations are not supported and are rejected.
    """
    try:
        with open(annotation_path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{annotation_path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise CocoFormatError("top level of annotation file must be an object")
    images = _require(doc, "images", "annotation file")
    anns = _require(doc, "annotations", "annotation file")
    cats = _require(doc, "categories", "annotation file")
    for key, value in (("images", images), ("annotations", anns), ("categories", cats)):
        if not isinstance(value, list):
            raise CocoFormatError(f"key '{key}' must be an array")

    categories = {}
    for c in cats:
        categories[int(_require(c, "id", "category"))] = c.get("name", str(c["id"]))

    by_image: dict[int, list] = {}
    meta = {}
    for im in images:
        iid = int(_require(im, "id", "image"))
        fname = _require(im, "file_name", f"image {iid}")
        h = int(_require(im, "height", f"image {iid}"))
        w = int(_require(im, "width", f"image {iid}"))
        path = os.path.join(image_root, fname)
        if not os.path.isfile(path):
            raise MissingImageError(f"image_id {iid}: file not found: {path}")
        meta[iid] = (h, w, path)
        by_image[iid] = []

    for a in anns:
        aid = int(_require(a, "id", "annotation"))
        where = f"annotation {aid}"
        iid = int(_require(a, "image_id", where))
        if iid not in meta:
            raise CocoFormatError(f"{where}: unknown image_id {iid}")
        if a.get("iscrowd", 0):
            raise SegmentationError(f"{where}: crowd annotations are not supported")
        h, w, _ = meta[iid]
        bbox = _require(a, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoFormatError(f"{where}: key 'bbox' must be [x, y, w, h]")
        box = _clip_box(bbox, h, w, aid)
        seg = _require(a, "segmentation", where)
        _check_segmentation(seg, h, w, aid)
        cat = int(_require(a, "category_id", where))
        if categories and cat not in categories:
            raise CocoFormatError(f"{where}: key 'category_id' refers to unknown category {cat}")
        ann = InstanceAnnotation(aid, box, seg, cat)
        if rasterize_mask(ann, h, w).sum() == 0:
            raise SegmentationError(f"{where}: segmentation covers no pixel centers")
        by_image[iid].append(ann)

    records = [
        _ImageRecord(iid, meta[iid][0], meta[iid][1], meta[iid][2], tuple(by_image[iid]))
        for iid in sorted(meta)
    ]
    return Dataset(records, categories)


def _clip_box(bbox, height, width, ann_id) -> tuple:
    x, y, bw, bh = (float(v) for v in bbox)
    if not (bw > 0 and bh > 0):
        raise CocoFormatError(f"annotation {ann_id}: degenerate bbox {list(bbox)} (zero width or height)")
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + bw, float(width)), min(y + bh, float(height))
    if x1 <= x0 or y1 <= y0:
        raise CocoFormatError(f"annotation {ann_id}: bbox {list(bbox)} lies outside the image")
    return (x0, y0, x1 - x0, y1 - y0)


def _check_segmentation(seg, height, width, ann_id):
    if isinstance(seg, list):
        if not seg:
            raise SegmentationError(f"annotation {ann_id}: empty polygon list")
        for poly in seg:
            if not isinstance(poly, list) or len(poly) % 2:
                raise SegmentationError(f"annotation {ann_id}: polygon must be a flat [x0, y0, x1, y1, ...] list")
            if len(poly) < 6:
                raise SegmentationError(f"annotation {ann_id}: polygon has fewer than 3 vertices")
    elif isinstance(seg, dict) and "counts" in seg and "size" in seg:
        if list(seg["size"]) != [height, width]:
            raise SegmentationError(
                f"annotation {ann_id}: RLE size {seg['size']} does not match image {[height, width]}")
    else:
        raise SegmentationError(f"annotation {ann_id}: unsupported segmentation encoding")


# -- rasterization -----------------------------------------------------------

def fill_polygon(xy: Sequence[float], height: int, width: int) -> np.ndarray:
    """Even-odd fill of one polygon, sampled at pixel centers."""
    pts = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise SegmentationError("polygon has fewer than 3 vertices")
    out = np.zeros((height, width), dtype=np.uint8)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    xc = np.arange(width) + 0.5
    for row in range(height):
        yc = row + 0.5
        crosses = (y0 > yc) != (y1 > yc)
        if not crosses.any():
            continue
        ax, ay, bx, by = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(ax + (yc - ay) * (bx - ax) / (by - ay))
        # a center is inside when an odd number of crossings lie strictly to its right
        right = len(xs) - np.searchsorted(xs, xc, side="right")
        out[row] = right % 2
    return out


def rle_decode(rle: dict) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = _rle_string_to_counts(counts)
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any():
        raise SegmentationError("RLE counts must be non-negative")
    if counts.sum() != h * w:
        raise SegmentationError(f"RLE length {int(counts.sum())} does not match {h}x{w}={h * w}")
    values = np.arange(len(counts)) % 2
    flat = np.repeat(values.astype(np.uint8), counts)
    return flat.reshape((w, h)).T.copy()


def rle_encode(mask: np.ndarray) -> dict:
    """Column-major COCO RLE with compressed string counts."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.T.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    if flat.size == 0:
        counts = [0]
    return {"size": [h, w], "counts": _counts_to_rle_string(counts)}


def _counts_to_rle_string(counts: Sequence[int]) -> str:
    out = []
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(chr(ch + 48))
    return "".join(out)


def _rle_string_to_counts(s: str | bytes) -> list:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rasterize_mask(annotation: InstanceAnnotation, height: int, width: int) -> np.ndarray:
    """Binary ``(height, width)`` uint8 raster of an annotation's segmentation."""
    seg = annotation.segmentation
    if isinstance(seg, np.ndarray):
        if seg.shape != (height, width):
            raise SegmentationError(
                f"annotation {annotation.id}: mask shape {seg.shape} != {(height, width)}")
        return (seg > 0).astype(np.uint8)
    if isinstance(seg, dict) and "counts" in seg:
        if [int(v) for v in seg["size"]] != [height, width]:
            raise SegmentationError(f"annotation {annotation.id}: RLE size mismatch")
        try:
            return rle_decode(seg)
        except SegmentationError as e:
            raise SegmentationError(f"annotation {annotation.id}: {e}") from None
    if isinstance(seg, list):
        out = np.zeros((height, width), dtype=np.uint8)
        for poly in seg:
            try:
                out |= fill_polygon(poly, height, width)
            except SegmentationError as e:
                raise SegmentationError(f"annotation {annotation.id}: {e}") from None
        return out
    raise SegmentationError(f"annotation {annotation.id}: unsupported segmentation encoding")


# -- views -------------------------------------------------------------------

def apply_split(dataset: Dataset, split: CategorySplit, mode: str = "all") -> Dataset:
    """Filter annotations by seen/unseen status.

    Dropped annotations move to ``ImageSample.excluded`` so that evaluation can
    still see where seen-class objects are. Images are never dropped here.
    """
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    missing = sorted(c for c in dataset.category_ids() if not split.covers(c))
    if missing:
        raise ValueError(f"category ids not covered by the split: {missing}")

    def tag(a):
        return replace(a, is_seen=a.category_id in split.seen_ids)

    records = []
    for rec in dataset._records:
        pool = [tag(a) for a in (*rec.annotations, *rec.excluded)]
        pool.sort(key=lambda a: a.id)
        if mode == "train_seen_only":
            keep = [a for a in pool if a.is_seen]
        elif mode == "eval_unseen_only":
            keep = [a for a in pool if not a.is_seen]
        else:
            keep = [tag(a) for a in rec.annotations]
        keep_ids = {a.id for a in keep}
        dropped = [a for a in pool if a.id not in keep_ids]
        records.append(replace(rec, annotations=tuple(keep), excluded=tuple(dropped)))
    return dataset._with_records(records)


def drop_images_without_annotations(dataset: Dataset) -> Dataset:
    return dataset._with_records([r for r in dataset._records if r.annotations])


def to_class_agnostic(dataset: Dataset) -> Dataset:
    """Map every category to a single foreground id.

    The original ids are kept in ``dataset.original_category_ids`` keyed by
    annotation id.
    """
    original = dict(dataset.original_category_ids)
    records = []
    for rec in dataset._records:
        for a in (*rec.annotations, *rec.excluded):
            original.setdefault(a.id, a.category_id)
        records.append(replace(
            rec,
            annotations=tuple(replace(a, category_id=FOREGROUND_ID) for a in rec.annotations),
            excluded=tuple(replace(a, category_id=FOREGROUND_ID) for a in rec.excluded),
        ))
    return dataset._with_records(records, categories={FOREGROUND_ID: "object"},
                                 original_category_ids=original)


def restore_category_ids(dataset: Dataset) -> Dataset:
    orig = dataset.original_category_ids
    records = [
        replace(rec,
                annotations=tuple(replace(a, category_id=orig.get(a.id, a.category_id)) for a in rec.annotations),
                excluded=tuple(replace(a, category_id=orig.get(a.id, a.category_id)) for a in rec.excluded))
        for rec in dataset._records
    ]
    return dataset._with_records(records, categories={}, original_category_ids={})


def write_coco(path: str | os.PathLike, dataset: Dataset, file_names: dict | None = None) -> None:
    """Serialize a dataset's annotations to COCO JSON (images are not written)."""
    images, anns = [], []
    for i, rec in enumerate(dataset._records):
        fname = (file_names or {}).get(rec.image_id)
        if fname is None:
            fname = os.path.basename(rec.source) if isinstance(rec.source, (str, os.PathLike)) else f"{rec.image_id}.png"
        images.append({"id": rec.image_id, "file_name": fname, "height": rec.height, "width": rec.width})
        for a in rec.annotations:
            seg = a.segmentation
            if isinstance(seg, np.ndarray):
                seg = rle_encode(seg)
            anns.append({
                "id": a.id, "image_id": rec.image_id, "category_id": a.category_id,
                "bbox": [float(v) for v in a.box], "segmentation": seg, "iscrowd": 0,
                "area": float(rasterize_mask(a, rec.height, rec.width).sum()),
            })
    cats = [{"id": int(k), "name": v} for k, v in sorted(dataset.categories.items())]
    with open(path, "w") as f:
        json.dump({"images": images, "annotations": anns, "categories": cats}, f, sort_keys=True)
