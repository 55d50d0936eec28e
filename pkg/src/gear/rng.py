"""Seeded, splittable random streams.

Every stream is a Philox counter-based generator keyed by ``(seed, *path)``
so independent consumers (init, shuffling, swap, annealing) never share
state and results do not depend on call order between them.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *path) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
