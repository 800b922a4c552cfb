"""Seeded, splittable random streams.

Every stochastic component draws from a named stream derived from a root
seed, so any sub-computation (model init, batching, one GA run for one
class) is reproducible in isolation and insensitive to the order in which
sibling computations consume randomness.

Streams are Philox counter-based generators keyed by
``SeedSequence(seed, spawn_key=stream)``; the stream is a tuple of small
non-negative ints identifying the consumer (see each module's call sites).
"""

from __future__ import annotations

import numpy as np

# Fixed tags for the top-level stream namespace. Sub-consumers append
# their own indices after the tag.
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_BATCH = 2
STREAM_UNLEARN = 3
STREAM_AUX = 4
STREAM_INVERT_WB = 5
STREAM_INVERT_BB = 6
STREAM_SCREEN = 7
STREAM_SUBSET = 8


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the deterministic generator for (seed, key).

    Same (seed, key) always yields an identical stream; distinct keys
    yield statistically independent streams.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(key))
    return np.random.Generator(np.random.Philox(ss))
