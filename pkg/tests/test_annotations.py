import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pycocotools import mask as coco_mask

import oracles
from openworld_det.annotations import (CategorySplit, CocoFormatError, Dataset, InstanceAnnotation,
                                       MissingImageError, SegmentationError, apply_split, load_coco,
                                       rasterize_mask, restore_category_ids, rle_decode, rle_encode,
                                       to_class_agnostic)


def _write(tmp_path, doc):
    p = tmp_path / "mod.json"
    p.write_text(json.dumps(doc))
    return p


def test_fixture_counts_match_json_walk(coco_fixture):
    path, img_dir, doc = coco_fixture
    ds = load_coco(path, img_dir)
    # independent walk over the raw JSON
    per_image = {im["id"]: 0 for im in doc["images"]}
    for a in doc["annotations"]:
        per_image[a["image_id"]] += 1
    assert len(ds) == len(per_image) == 2
    assert sum(len(ds.annotations(i)) for i in range(len(ds))) == 3
    assert [len(ds.annotations(i)) for i in range(len(ds))] == [per_image[i] for i in ds.image_ids]


def test_images_are_normalized(coco_fixture):
    path, img_dir, _ = coco_fixture
    s = load_coco(path, img_dir)[0]
    assert s.image.shape == (8, 8, 3)
    assert s.image.dtype == np.float64
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_empty_annotations(coco_fixture, tmp_path):
    path, img_dir, doc = coco_fixture
    doc = dict(doc, annotations=[])
    ds = load_coco(_write(tmp_path, doc), img_dir)
    assert len(ds) == 2
    assert all(len(s.annotations) == 0 for s in ds)


def test_zero_width_box_names_annotation(coco_fixture, tmp_path):
    path, img_dir, doc = coco_fixture
    doc = copy.deepcopy(doc)
    doc["annotations"][1]["bbox"] = [10, 20, 0, 5]
    with pytest.raises(CocoFormatError, match="annotation 11"):
        load_coco(_write(tmp_path, doc), img_dir)


def test_missing_key_is_named(coco_fixture, tmp_path):
    _, img_dir, doc = coco_fixture
    doc = copy.deepcopy(doc)
    del doc["annotations"][0]["bbox"]
    with pytest.raises(CocoFormatError, match="'bbox'"):
        load_coco(_write(tmp_path, doc), img_dir)
    with pytest.raises(CocoFormatError, match="'categories'"):
        load_coco(_write(tmp_path, {"images": [], "annotations": []}), img_dir)


def test_missing_image_names_id(coco_fixture, tmp_path):
    _, img_dir, doc = coco_fixture
    doc = copy.deepcopy(doc)
    doc["images"][1]["file_name"] = "nope.png"
    with pytest.raises(MissingImageError, match="image_id 2"):
        load_coco(_write(tmp_path, doc), img_dir)


def test_unsupported_segmentation_names_annotation(coco_fixture, tmp_path):
    _, img_dir, doc = coco_fixture
    doc = copy.deepcopy(doc)
    doc["annotations"][2]["segmentation"] = {"points": [1, 2]}
    with pytest.raises(SegmentationError, match="annotation 12"):
        load_coco(_write(tmp_path, doc), img_dir)


def test_loading_is_deterministic(coco_fixture):
    path, img_dir, _ = coco_fixture
    a, b = load_coco(path, img_dir), load_coco(path, img_dir)
    assert a.image_ids == b.image_ids
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert [x.payload() for x in sa.annotations] == [x.payload() for x in sb.annotations]


def test_square_polygon_has_16_pixels():
    ann = InstanceAnnotation(1, (2, 2, 4, 4), [[2, 2, 6, 2, 6, 6, 2, 6]], 1)
    m = rasterize_mask(ann, 8, 8)
    assert m.sum() == 16
    assert np.array_equal(m, oracles.polygon_raster([(2, 2), (6, 2), (6, 6), (2, 6)], 8, 8))
    assert m[2:6, 2:6].all()


def test_full_image_polygon_and_empty_rle():
    full = InstanceAnnotation(1, (0, 0, 5, 7), [[0, 0, 5, 0, 5, 7, 0, 7]], 1)
    assert rasterize_mask(full, 7, 5).all()
    empty = InstanceAnnotation(2, (0, 0, 1, 1), rle_encode(np.zeros((7, 5))), 1)
    assert rasterize_mask(empty, 7, 5).sum() == 0


def test_rasterize_errors():
    with pytest.raises(SegmentationError):
        rasterize_mask(InstanceAnnotation(1, (0, 0, 1, 1), [[0, 0, 1, 1]], 1), 4, 4)
    with pytest.raises(SegmentationError):
        rasterize_mask(InstanceAnnotation(1, (0, 0, 1, 1), {"size": [4, 4], "counts": [3, 4]}, 1), 4, 4)


def test_rle_matches_pycocotools():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = (rng.random((13, 9)) < 0.3).astype(np.uint8)
        ours = rle_encode(m)
        ref = coco_mask.encode(np.asfortranarray(m))
        assert ours["counts"] == ref["counts"].decode()
        assert np.array_equal(rle_decode(ours), m)
        assert np.array_equal(rle_decode({"size": ref["size"], "counts": ref["counts"]}), m)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 34, allow_nan=False), st.floats(-2, 34, allow_nan=False)),
                min_size=3, max_size=12))
def test_polygon_fill_matches_point_in_polygon(pts):
    pts = [(round(x, 3), round(y, 3)) for x, y in pts]
    flat = [v for p in pts for v in p]
    ann = InstanceAnnotation(1, (0, 0, 1, 1), [flat], 1)
    got = rasterize_mask(ann, 32, 32)
    want = oracles.polygon_raster(pts, 32, 32)
    assert got.sum() == want.sum()
    assert np.array_equal(got, want)


def _toy_dataset():
    anns = [
        [InstanceAnnotation(1, (0, 0, 2, 2), np.pad(np.ones((2, 2)), ((0, 6), (0, 6))), 1),
         InstanceAnnotation(2, (4, 4, 2, 2), np.pad(np.ones((2, 2)), ((4, 2), (4, 2))), 2),
         InstanceAnnotation(3, (2, 0, 2, 2), np.pad(np.ones((2, 2)), ((0, 6), (2, 4))), 3)],
        [InstanceAnnotation(4, (0, 0, 8, 8), np.ones((8, 8)), 3)],
    ]
    return Dataset.from_arrays([np.zeros((8, 8, 3))] * 2, anns, categories={1: "a", 2: "b", 3: "c"})


def test_split_train_seen_only():
    ds = apply_split(_toy_dataset(), CategorySplit({1, 2}, {3}), "train_seen_only")
    assert len(ds) == 2
    assert [a.id for a in ds.annotations(0)] == [1, 2]
    assert len(ds.annotations(1)) == 0
    assert all(a.is_seen for a in ds.annotations(0))


def test_split_all_is_identity():
    base = _toy_dataset()
    ds = apply_split(base, CategorySplit({1, 2}, {3}), "all")
    for i in range(len(base)):
        assert [a.id for a in ds.annotations(i)] == [a.id for a in base.annotations(i)]
        assert [a.category_id for a in ds.annotations(i)] == [a.category_id for a in base.annotations(i)]


def test_split_missing_category_lists_id():
    with pytest.raises(ValueError, match=r"\[3\]"):
        apply_split(_toy_dataset(), CategorySplit({1}, {2}), "all")


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        CategorySplit({1, 2}, {2})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(1, 5), max_size=6), min_size=1, max_size=5), st.sets(st.integers(1, 5)))
def test_split_partitions_annotations(cats_per_image, seen):
    aid = iter(range(1, 1000))
    anns = [[InstanceAnnotation(next(aid), (0, 0, 1, 1), np.ones((2, 2)), c) for c in cats] for cats in cats_per_image]
    ds = Dataset.from_arrays([np.zeros((2, 2, 1))] * len(anns), anns)
    split = CategorySplit(seen, set(range(1, 6)) - seen)
    train = apply_split(ds, split, "train_seen_only")
    held = apply_split(ds, split, "eval_unseen_only")
    # the complement split's training view is the same held-out set
    flipped = apply_split(train, split.complement(), "train_seen_only")
    for i in range(len(ds)):
        a = sorted(x.id for x in train.annotations(i))
        b = sorted(x.id for x in held.annotations(i))
        assert b == sorted(x.id for x in flipped.annotations(i))
        assert not set(a) & set(b)
        assert sorted(a + b) == sorted(x.id for x in ds.annotations(i))


def test_class_agnostic_round_trip():
    base = _toy_dataset()
    view = to_class_agnostic(base)
    assert view.category_ids() == {1}
    assert len(base.category_ids()) == 3
    back = restore_category_ids(view)
    for i in range(len(base)):
        assert [a.category_id for a in back.annotations(i)] == [a.category_id for a in base.annotations(i)]
    assert all(view.original_category_ids[a.id] == a.category_id for s in base for a in s.annotations)


def test_class_agnostic_empty():
    assert len(to_class_agnostic(Dataset([]))) == 0
