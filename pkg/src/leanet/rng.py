"""Seed derivation.

Every stochastic stage draws from ``derive(seed, *keys)`` so stages can be
rerun independently while still being fully determined by one root seed.
"""
import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFF


def derive(seed, *keys):
    """Return a ``numpy.random.Generator`` keyed by ``seed`` and a path of keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_key(k) for k in keys)]))


def derive_int(seed, *keys):
    return int(derive(seed, *keys).integers(0, 2**31 - 1))
