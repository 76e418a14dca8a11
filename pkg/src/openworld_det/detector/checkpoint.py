"""Checkpoint archive: a zip of ``.npy`` arrays readable with ``numpy.load``.

Layout (format version 1):

* ``param/<name>.npy`` -- one array per model parameter, in model order
* ``meta.npy`` -- a 0-d unicode array holding a JSON object with
  ``format_version``, ``detector_config``, ``backbone_spec`` and any extra
  metadata passed to :func:`save_checkpoint`.

Zip entries carry a fixed timestamp so identical parameters give identical
bytes.
"""
from __future__ import annotations

import io
import json
import zipfile

import numpy as np
import torch

from .model import BackboneSpec, DetectorConfig, Detector, build_detector

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.require(arr, requirements="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, detector: Detector, extra: dict | None = None) -> None:
    spec = detector.backbone_spec
    meta = {
        "format_version": FORMAT_VERSION,
        "detector_config": detector.config.to_dict(),
        "backbone_spec": {"channels": list(spec.channels), "strides": list(spec.strides),
                          "in_channels": spec.in_channels},
        "dtype": str(next(detector.parameters()).dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, p in detector.named_parameters():
            info = zipfile.ZipInfo(f"param/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, _npy_bytes(p.detach().cpu().numpy()))
        info = zipfile.ZipInfo("meta.npy", date_time=_EPOCH)
        zf.writestr(info, _npy_bytes(np.array(json.dumps(meta, sort_keys=True))))


def read_meta(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as e:
        raise CheckpointError(f"{path}: not a detector checkpoint ({e})") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    return meta


def load_checkpoint(path) -> Detector:
    meta = read_meta(path)
    config = DetectorConfig.from_dict(meta["detector_config"])
    spec = BackboneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["backbone_spec"].items()})
    det = build_detector(config, spec, dtype=getattr(torch, meta.get("dtype", "float32")))
    state = {}
    with np.load(path, allow_pickle=False) as z:
        for name, p in det.named_parameters():
            key = f"param/{name}"
            if key not in z.files:
                raise CheckpointError(f"{path}: missing parameter {name}")
            state[name] = torch.as_tensor(z[key])
    det.load_state_dict(state, strict=True)
    return det
