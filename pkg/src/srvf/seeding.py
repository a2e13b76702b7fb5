"""Process-independent seeded randomness.

Built on blake2b rather than Python's salted hash(), so the same inputs give
the same draws in every run, on every platform, which keeps reruns
reproducible end to end.
"""

from __future__ import annotations

import hashlib
import random

__all__ = ["stable_u64", "hash01", "stable_rng"]


def stable_u64(*parts: object) -> int:
    """Deterministic 64-bit digest of a sequence of primitive values."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def hash01(*parts: object) -> float:
    """Deterministic draw in [0, 1)."""
    return stable_u64(*parts) / 2**64


def stable_rng(*parts: object) -> random.Random:
    """A random.Random seeded from the digest of the given values."""
    return random.Random(stable_u64(*parts))
