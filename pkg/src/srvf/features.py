"""Seeded feature hashing for rationale texts.

Texts are mapped to sparse count vectors over a shared bucket space:
character n-grams (vectorized rolling hash) plus word unigrams, with the
combined counts l2-normalized. The hash is self-contained and stable across
processes, so identical (text, seed) inputs always produce identical vectors.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

__all__ = ["HashedTextFeaturizer"]

_U64 = np.uint64
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a(data: bytes, salt: int) -> int:
    h = (_FNV_OFFSET ^ (salt & _MASK64)) & _MASK64
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _mix_array(h: np.ndarray) -> np.ndarray:
    # splitmix-style finalizer; spreads low-entropy rolling hashes over buckets
    h = h.copy()
    h ^= h >> _U64(33)
    h *= _U64(0xFF51AFD7ED558CCD)
    h ^= h >> _U64(29)
    h *= _U64(0xC4CEB9FE1A85EC53)
    h ^= h >> _U64(32)
    return h


class HashedTextFeaturizer:
    """Hash character n-grams and word unigrams into a fixed bucket space."""

    def __init__(self, feature_space: int, ngram_range: tuple[int, int], hash_seed: int):
        lo, hi = int(ngram_range[0]), int(ngram_range[1])
        if feature_space < 2:
            raise ValueError("feature_space must be at least 2")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad ngram_range {ngram_range!r}")
        self.feature_space = int(feature_space)
        self.ngram_range = (lo, hi)
        self.hash_seed = int(hash_seed)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def features(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Return (sorted bucket indices, l2-normalized counts) for one text."""
        if not text or not text.strip():
            raise ValueError("cannot featurize an empty text")
        cached = self._cache.get(text)
        if cached is not None:
            return cached

        lowered = text.lower()
        data = np.frombuffer(lowered.encode("utf-8"), dtype=np.uint8).astype(np.uint64)
        hashes: list[np.ndarray] = []
        lo, hi = self.ngram_range
        for n in range(lo, hi + 1):
            if len(data) < n:
                continue
            salt = _fnv1a(f"char:{n}".encode(), self.hash_seed)
            win = np.lib.stride_tricks.sliding_window_view(data, n)
            h = np.full(win.shape[0], salt, dtype=np.uint64)
            prime = _U64(_FNV_PRIME)
            for j in range(n):
                h = (h ^ win[:, j]) * prime
            hashes.append(_mix_array(h))

        word_salt = _fnv1a(b"word", self.hash_seed)
        words = [_fnv1a(w.encode("utf-8"), word_salt) for w in lowered.split()]
        if words:
            hashes.append(_mix_array(np.asarray(words, dtype=np.uint64)))

        if not hashes:
            raise ValueError("text produced no features")
        buckets = np.concatenate(hashes) % _U64(self.feature_space)
        idx, counts = np.unique(buckets, return_counts=True)
        vals = counts.astype(np.float64)
        vals /= np.linalg.norm(vals)
        result = (idx.astype(np.int64), vals)
        self._cache[text] = result
        return result

    def matrix(self, texts: list[str]) -> sparse.csr_matrix:
        """Stack per-text feature vectors into a CSR matrix (rows follow input order)."""
        indptr = [0]
        indices: list[np.ndarray] = []
        values: list[np.ndarray] = []
        for t in texts:
            idx, vals = self.features(t)
            indices.append(idx)
            values.append(vals)
            indptr.append(indptr[-1] + len(idx))
        if not texts:
            return sparse.csr_matrix((0, self.feature_space), dtype=np.float64)
        return sparse.csr_matrix(
            (np.concatenate(values), np.concatenate(indices), np.asarray(indptr)),
            shape=(len(texts), self.feature_space),
        )
