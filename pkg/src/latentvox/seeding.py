"""Deterministic RNG derivation.

All randomness in the package flows through derive_rng(seed, *scope): the scope
strings keep independent stages (dataset generation, each training phase, each
lambda rung) on independent, reproducible streams. Same seed + same scope =>
bit-identical draws on a given numpy version.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *scope: object) -> bytes:
    """Hash (seed, scope...) into 32 bytes; scope parts are str()-ed."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for part in scope:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return h.digest()


def derive_rng(seed: int, *scope: object) -> np.random.Generator:
    """A PCG64 generator seeded from sha256(seed, *scope)."""
    key = derive_key(seed, *scope)
    words = np.frombuffer(key, dtype=np.uint64)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(map(int, words)))))
