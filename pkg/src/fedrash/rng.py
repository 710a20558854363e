"""Reproducible random streams.

All randomness in the package flows through Philox 4x64, a counter-based
generator whose output is identical across platforms and numpy versions
that ship the same bit generator. Independent streams are derived by
hashing a base seed together with a tuple of string/int tags (e.g.
("model-init", seed) vs ("batch-shuffle", seed, round)), so concurrent
workers never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_seed"]


def _digest(seed: int, tags: tuple) -> bytes:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(repr(tag).encode())
    return h.digest()


def stream_seed(seed: int, *tags) -> int:
    """Derive a stable 63-bit integer seed for the stream (seed, *tags)."""
    d = _digest(seed, tags)
    return int.from_bytes(d[:8], "little") >> 1


def stream(seed: int, *tags) -> np.random.Generator:
    """Return a Philox generator keyed by (seed, *tags).

    Same arguments always produce the same stream; distinct tag tuples
    produce statistically independent streams.
    """
    d = _digest(seed, tags)
    key = np.frombuffer(d[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
