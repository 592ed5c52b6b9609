"""Deterministic random substreams.

All randomness in the package is keyed: a master integer seed plus a tuple of
small non-negative integers (replicate index, interim index, imputation
index, block index, ...) identifies one substream. Substreams built this way
are independent of each other and of worker scheduling, so results are
reproducible bit for bit regardless of how work is distributed.
"""
from __future__ import annotations

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the substream identified by (seed, key)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)
