"""Order-independent RNG streams.

Every random decision in the package draws from a generator keyed by a tuple
like ``(seed, "le", epoch)``, so results never depend on call order or thread
scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash(value: str | bytes) -> int:
    """64-bit hash that is identical across processes and platforms."""
    if isinstance(value, str):
        value = value.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(value, digest_size=8).digest(), "little")


def rng_for(seed: int, *keys: int | str) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        entropy.append(stable_hash(key) if isinstance(key, str) else int(key) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
