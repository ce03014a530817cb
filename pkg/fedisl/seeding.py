"""Named, counter-based random streams.

Every consumer of randomness asks for its own stream keyed by a purpose name
and integer keys (satellite index, iteration, draw, ...). Streams never share
state, so the order in which consumers run cannot change what they draw.
"""

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, purpose, *keys)``."""
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(purpose_key(purpose), *keys))
    return np.random.Generator(np.random.Philox(ss))


def satellite_index(plane: int, slot: int, sats_per_plane: int) -> int:
    """Flat 0-based index of a satellite, used as a stream key."""
    return (plane - 1) * sats_per_plane + (slot - 1)
