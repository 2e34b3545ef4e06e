"""Reproducible random streams.

Every stream is a Philox4x64-10 counter-based generator keyed by a root
seed plus a tuple of labels, so any block of work can draw its numbers
without knowing what other blocks consumed.  Labels may be ints or strings;
strings are mapped through CRC-32 so the mapping is stable across Python
processes (unlike ``hash``).  Normal variates come from numpy's ziggurat
sampler (``Generator.standard_normal``).
"""

from __future__ import annotations

import zlib

import numpy as np


def _label(x) -> int:
    if isinstance(x, (int, np.integer)):
        if x < 0:
            raise ValueError("stream labels must be nonnegative")
        return int(x)
    return zlib.crc32(str(x).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(_label(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels) -> int:
    """A 64-bit child seed, e.g. one per Monte Carlo replicate."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(_label(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
