"""Keyed, counter-based random streams.

Every stochastic routine in the package draws from a Philox generator keyed
by (master seed, *path), so any site/stage/sweep gets its own independent
stream. Results are therefore pure functions of (inputs, seed) and do not
depend on execution order or thread count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key parts must be non-negative, got {part}")
    return int(part)


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for stream (seed, *path).

    Calling twice with the same arguments yields identical draw sequences.
    String path parts are hashed with crc32 so call sites stay readable.
    """
    key = tuple(_key_part(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
