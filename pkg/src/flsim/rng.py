"""Deterministic RNG substreams.

Every random draw in a run comes from a generator derived by hashing
``(seed, tag, *keys)``. Two runs that share a seed therefore see the same
benign randomness for the same (tag, round, client), independent of the
order in which clients are processed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Return a fresh generator keyed by ``(seed, tag, keys)``."""
    material = repr((int(seed), str(tag), tuple(int(k) for k in keys))).encode()
    digest = hashlib.sha256(material).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
