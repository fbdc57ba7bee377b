"""Seed plumbing: every stochastic component draws from its own substream."""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label) -> list[int]:
    if isinstance(label, (int, np.integer)):
        return [int(label) & 0xFFFFFFFF, (int(label) >> 32) & 0xFFFFFFFF]
    digest = hashlib.blake2b(str(label).encode(), digest_size=8).digest()
    return list(np.frombuffer(digest, dtype=np.uint32).tolist())


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    key: list[int] = []
    for label in labels:
        key.extend(_label_words(label))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(key))


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator keyed by (master seed, labels); independent of call order."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *labels)))


def mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized; wraps modulo 2**64
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))
