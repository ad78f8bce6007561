"""Reproducible, independent random streams.

Streams come from numpy's counter-based Philox generator seeded through a
``SeedSequence`` whose spawn key is the caller's structural coordinates
(sweep point, repetition, tensor role, layer, batch).  Two different keys give
statistically independent streams; the same key always replays the same one.
"""
from __future__ import annotations

import numpy as np

ROLE_IDS = {"activations": 0, "weights": 1, "biases": 2}


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream addressed by ``(seed, *key)``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class StreamFactory:
    """Derives child streams under a fixed key prefix."""

    def __init__(self, seed: int, *prefix: int):
        self.seed = int(seed)
        self.prefix = tuple(int(k) for k in prefix)

    def child(self, *key: int) -> StreamFactory:
        return StreamFactory(self.seed, *self.prefix, *key)

    def generator(self, *key: int) -> np.random.Generator:
        return stream(self.seed, *self.prefix, *key)

    def __repr__(self) -> str:
        return f"StreamFactory(seed={self.seed}, prefix={self.prefix})"
