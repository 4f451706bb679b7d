"""Named, seeded random streams.

Every random draw in the package comes from ``stream(seed, *keys)``. The keys
are hashed with CRC32 into a numpy ``SeedSequence`` so that the same
``(seed, keys)`` always yields the same PCG64 generator, independent of call
order or of how work is split across processes.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for a named child stream."""
    return int(stream(seed, *keys).integers(0, 2**63 - 1))
