"""Seed splitting.

Every stochastic stage draws from its own PCG64 sub-stream::

    SeedSequence(entropy=seed, spawn_key=(k1, k2, ...))

where string path elements map to ``zlib.crc32(name)`` and integers are used
as-is. Toggling one stage therefore never perturbs the draws of another.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def substream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
