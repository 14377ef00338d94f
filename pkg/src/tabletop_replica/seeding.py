"""Deterministic RNG derivation.

All randomness in a run flows from one root seed through named streams, so a
stage can be re-run in isolation and still see the same draws. Per-entity
streams (candidate index, object id, ...) hang off the named stream, which
keeps results independent of worker count and evaluation order.
"""

from __future__ import annotations

import numpy as np

# Stable stream ids; never reorder, only append.
STREAMS = {
    "scene": 0,
    "noise": 1,
    "sampling": 2,
    "evaluation": 3,
}


def stream_rng(seed: int, stream: str, *entity: int) -> np.random.Generator:
    """Generator for a named stream, optionally sub-keyed by entity indices."""
    key = (STREAMS[stream],) + tuple(int(e) for e in entity)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))
