"""Named deterministic RNG substreams.

One root seed fans out into independent generators keyed by purpose, so
adding draws to one consumer never perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for a named stream derived from the root seed."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])
