"""Seeded random-number streams.

Every source of randomness in the package draws from a named substream of
one root seed, so individual components (init, shuffling, fold assignment)
can be varied independently while full runs stay bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the named substream of ``seed``."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
