"""Seed derivation: every random stream is keyed by the global seed plus names/ids."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream ``(seed, *keys)``, e.g. ``derive_rng(7, "backerase", image_id)``."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys]))
