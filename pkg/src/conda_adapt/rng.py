"""Named deterministic random streams derived from one master seed.

Every stochastic step in the package draws from its own named stream so that
adding or removing one consumer never shifts the draws of another, and a
single uint64 seed reproduces an entire run bit for bit.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent Generator for ``name`` under master ``seed``."""
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.default_rng(seq)
