"""Deterministic random-stream derivation.

Every stochastic choice in the package draws from a stream derived from
(master seed, string tag, *integer indices).  Streams are independent of
call order and of each other, which is what makes full runs and resumed
runs bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return a fresh PCG64 generator for (seed, tag, indices)."""
    key = (int(seed), _tag_to_int(tag)) + tuple(int(i) for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
