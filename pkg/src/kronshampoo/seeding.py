"""Named random streams derived from one master seed.

``rng_for(master, tag, index)`` feeds ``(master, crc32(tag), index)`` into
:class:`numpy.random.SeedSequence`, so every purpose ("init", "batch",
"probe", "labels", ...) gets an independent, replayable stream.
"""
import zlib

import numpy as np


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def rng_for(master: int, tag: str, index: int = 0) -> np.random.Generator:
    if master < 0 or index < 0:
        raise ValueError("seeds and stream indices must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(master), tag_code(tag), int(index)]))


def as_rng(seed_or_rng, tag="default"):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return rng_for(int(seed_or_rng), tag)
