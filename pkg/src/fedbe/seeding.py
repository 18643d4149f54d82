"""Named, independent random streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def seed_for(root: int, name: str, *keys: int) -> np.random.SeedSequence:
    if root < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    return np.random.SeedSequence([int(root), stream_key(name), *map(int, keys)])


def rng_for(root: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for stream ``name`` (plus optional integer keys such as round or client id)."""
    return np.random.default_rng(seed_for(root, name, *keys))


def int_seed(root: int, name: str, *keys: int) -> int:
    return int(seed_for(root, name, *keys).generate_state(1, np.uint64)[0] >> np.uint64(1))
