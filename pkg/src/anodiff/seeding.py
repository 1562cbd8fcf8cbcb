"""Deterministic RNG derivation.

Every stochastic stage in this package gets its own ``numpy.random.Generator``
derived from a master seed plus a path of keys, so results never depend on
call order between unrelated stages and any stage can be re-run in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed path keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported seed path key: {key!r}")


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for (master_seed, path...); path entries are ints or strings."""
    entropy = [_key_to_int(master_seed)] + [_key_to_int(k) for k in path]
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    """Independent PCG64 generator for the given seed path."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *path)))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n independent child generators of rng (order is deterministic)."""
    return rng.spawn(n)
