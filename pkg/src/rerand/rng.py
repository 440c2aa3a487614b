"""Named random-number streams on a counter-based generator.

Every stochastic routine in the package draws from a Philox generator whose
stream is derived from ``(master_seed, purpose, *indices)``.  Because streams
are keyed by purpose and index rather than by draw order, a simulation split
across any number of workers consumes exactly the same random numbers per
task and therefore produces identical results.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "ensure_rng"]


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        part = int(part)
        if part < 0:
            raise ValueError(f"stream key parts must be nonnegative, got {part}")
        return part
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream key parts must be int or str, got {type(part).__name__}")


def substream(seed, *path) -> np.random.Generator:
    """Return the Philox generator for the stream named by ``(seed, *path)``.

    ``path`` entries are nonnegative ints (e.g. a replication index) or short
    strings naming the purpose (e.g. ``"assign"``); strings are mapped to
    integers with CRC-32 so the derivation is stable across runs and platforms.
    """
    entropy = [_key(seed)] + [_key(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def ensure_rng(rng) -> np.random.Generator:
    """Coerce a seed, SeedSequence, or Generator into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(rng))
    if rng is None:
        raise ValueError("an explicit seed or Generator is required")
    return substream(rng)
