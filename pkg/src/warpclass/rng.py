"""Deterministic random substreams.

Streams use the counter-based Philox generator keyed by (seed, path
hash), so any draw is reproducible regardless of execution order or
thread scheduling.  The path hash is FNV-1a 64-bit; constants below are
the standard offset basis and prime.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def fnv1a(text: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of ``text``."""
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def substream(seed: int, path: str) -> np.random.Generator:
    """Independent stream for (seed, path); insensitive to other streams."""
    key = np.array([seed & _MASK64, fnv1a(path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
