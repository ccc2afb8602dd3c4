"""Seed derivation.

Every random stream in the package is a ``numpy.random.Generator`` built from
``SeedSequence(seed, spawn_key=key)``. The spawn key names the purpose of the
stream (replication, role, trajectory index, ...), so a stream never depends
on how many other streams were drawn before it or in which order.
"""

from __future__ import annotations

import numpy as np

BIT_GENERATORS = {
    "philox": np.random.Philox,
    "pcg64": np.random.PCG64,
}
DEFAULT_ALGORITHM = "philox"


def make_rng(seed: int, *key: int, algorithm: str = DEFAULT_ALGORITHM) -> np.random.Generator:
    try:
        bitgen = BIT_GENERATORS[algorithm]
    except KeyError:
        raise ValueError(f"unknown rng algorithm {algorithm!r}; choose from {sorted(BIT_GENERATORS)}")
    return np.random.Generator(bitgen(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


def derive_seed(seed: int, *key: int) -> int:
    """A child 64-bit seed, stable for a given (seed, key)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
