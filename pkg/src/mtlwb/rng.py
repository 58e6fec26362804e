"""Deterministic RNG substream derivation.

Every source of randomness in the workbench is a named substream of a single
root seed.  Streams are derived by hashing the label tuple with blake2b, so
the same (seed, labels) pair yields the same generator on every platform and
regardless of which other streams were drawn first.  This is what makes
parallel execution of grid cells reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(root_seed: int, *labels: object) -> int:
    """Derive a 128-bit integer key for the substream named by ``labels``."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(root_seed)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(repr(label).encode())
    return int.from_bytes(h.digest(), "little")


def substream(root_seed: int, *labels: object) -> np.random.Generator:
    """Return a Generator for the substream named by ``labels``.

    Example: ``substream(seed, "loto", combo_id, task_id, "init")``.
    """
    return np.random.Generator(np.random.PCG64(stream_key(root_seed, *labels)))
