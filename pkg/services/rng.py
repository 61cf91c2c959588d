"""
Seeded random streams and keyed hashing.

An ``RngStream`` is a value: ``(seed, stream_id)`` fully determines the draw
sequence of the numpy ``Generator`` it builds, and distinct stream ids map
to distinct ``SeedSequence`` spawn keys, so streams are independent.  Child
streams are derived by hashing a parent id with stable keys, never with
Python's per-process randomized ``hash()``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Union

import numpy as np

_MASK64 = (1 << 64) - 1

Key = Union[int, float, str]


def _encode_keys(*keys: Key) -> bytes:
    # repr() of floats round-trips, so 0.1 and 0.1000000001 never collide.
    return "\x1f".join(repr(k) for k in keys).encode("utf-8")


def stable_hash64(*keys: Key, key: int = 0) -> int:
    """Keyed 64-bit BLAKE2b digest of ``keys``."""
    digest = hashlib.blake2b(
        _encode_keys(*keys),
        digest_size=8,
        key=int(key & _MASK64).to_bytes(8, "little"),
    )
    return int.from_bytes(digest.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: Key) -> "RngStream":
        """Derived stream for a sub-task (cell, iteration, stage)."""
        return RngStream(self.seed, stable_hash64(self.stream_id, *keys, key=self.seed))
