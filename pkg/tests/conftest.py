import json
import os
import sys
import warnings

import numpy as np
import pytest
import torch
from PIL import Image

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)
warnings.filterwarnings("ignore", message=".*TypedStorage.*")


def write_png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


@pytest.fixture
def coco_fixture(tmp_path):
    """Two 8x8 images, three annotations (polygon, RLE, polygon); categories 1 and 2."""
    img_dir = tmp_path / "images"
    img_dir.mkdir()
    rng = np.random.default_rng(0)
    write_png(img_dir / "a.png", rng.integers(0, 256, (8, 8, 3)))
    write_png(img_dir / "b.png", rng.integers(0, 256, (8, 8, 3)))
    # column-major RLE of a mask with rows 1-2 of column 0 set: 1 zero, 2 ones, rest zeros
    rle = {"size": [8, 8], "counts": [1, 2, 61]}
    doc = {
        "images": [{"id": 1, "file_name": "a.png", "height": 8, "width": 8},
                   {"id": 2, "file_name": "b.png", "height": 8, "width": 8}],
        "annotations": [
            {"id": 10, "image_id": 1, "category_id": 1, "bbox": [2, 2, 4, 4],
             "segmentation": [[2, 2, 6, 2, 6, 6, 2, 6]], "iscrowd": 0},
            {"id": 11, "image_id": 1, "category_id": 2, "bbox": [0, 1, 1, 2], "segmentation": rle, "iscrowd": 0},
            {"id": 12, "image_id": 2, "category_id": 2, "bbox": [0, 0, 8, 8],
             "segmentation": [[0, 0, 8, 0, 8, 8, 0, 8]], "iscrowd": 0},
        ],
        "categories": [{"id": 1, "name": "one"}, {"id": 2, "name": "two"}],
    }
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(doc))
    return path, img_dir, doc
