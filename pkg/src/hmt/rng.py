"""Deterministic named RNG streams.

All stochastic commands derive their generators from one master seed through
named streams, so adding randomness to one subsystem never perturbs another.
"""

import hashlib

import numpy as np


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream derived from the master seed.

    The same (seed, name) pair always yields the same stream, independent of
    platform and of any other stream that was created before it.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))
