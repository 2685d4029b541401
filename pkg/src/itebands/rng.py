"""Counter-based random streams.

Every stream is keyed by ``(master_seed, domain, index, attempt)`` so
replications can run in any order or on any worker and still draw identical
numbers. ``domain`` keeps the data-generating, multiplier and resampling
streams apart even when they share a master seed.
"""
from __future__ import annotations

import numpy as np

DGP, MULTIPLIER, RESAMPLE = 0, 1, 2


def stream(master_seed: int, index: int = 0, attempt: int = 0, domain: int = DGP) -> np.random.Generator:
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, int(domain), int(index), int(attempt)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed: int, index: int) -> int:
    """A 32-bit child seed, used to hand each replication its own master seed."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, 99, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
