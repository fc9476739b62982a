"""Deterministic named RNG substreams derived from one 64-bit master seed.

Every random decision in the pipeline draws from ``substream(seed, name, *key)``
so that components are independently reproducible: the masking stream for step
17 is the same no matter which worker builds it or what ran before.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Stream names used across the package; free-form names are allowed too.
MASKING = "masking"
DLM = "dlm"
INIT = "init"
SCHEDULE = "schedule"
BATCH = "batch"
DROPOUT = "dropout"


def substream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Return a fresh Generator keyed by (seed, name, *key).

    Uses sha256 rather than hash() so streams are stable across interpreter
    runs and machines.
    """
    h = hashlib.sha256()
    h.update((int(seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little", signed=False))
    h.update(name.encode("utf-8"))
    for k in key:
        h.update(int(k).to_bytes(8, "little", signed=True))
    entropy = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
