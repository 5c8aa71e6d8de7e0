"""Named, splittable random streams.

All randomness comes from numpy's PCG64 bit generator seeded through a
``SeedSequence`` whose spawn key is ``(crc32(purpose), *keys)``.  PCG64 and
SeedSequence are specified independently of platform, so a given
``(seed, purpose, keys)`` triple yields the same draws on every machine.
Streams are derived statelessly, which keeps results independent of the order
in which they are requested (e.g. per-sample data generation, per-step noise).
"""
from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "numpy.PCG64 via SeedSequence(seed, spawn_key=(crc32(purpose), *keys))"


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose_key(purpose), *map(int, keys)))
    return np.random.Generator(np.random.PCG64(ss))
