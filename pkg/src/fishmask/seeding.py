"""Deterministic sub-seed derivation.

Every consumer of randomness in a run (init, Fisher sample selection, random
masks, training shuffle, sharding) gets its own stream derived from the run
seed and a fixed purpose tag, so changing one consumer never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed(seed: int, *names: str | int) -> np.random.SeedSequence:
    entropy = [int(seed) & 0xFFFFFFFF]
    for name in names:
        entropy.append(_tag(name) if isinstance(name, str) else int(name) & 0xFFFFFFFF)
    return np.random.SeedSequence(entropy)


def rng_for(seed: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def int_seed(seed: int, *names: str | int) -> int:
    """A plain integer seed for APIs that want one."""
    return int(derive_seed(seed, *names).generate_state(1, dtype=np.uint32)[0])
