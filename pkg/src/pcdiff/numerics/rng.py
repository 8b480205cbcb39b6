"""Named random streams derived from one seed.

Each stream is a Philox (counter-based) generator keyed by the root seed and
the stream name, so adding a consumer never shifts the draws of another.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStreams:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = self.fresh(name)
            self._streams[name] = gen
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """A new generator for ``name``, always starting at the same counter."""
        keys = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_key(p) for p in self.path + (name,)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))

    def child(self, name: str) -> "RngStreams":
        return RngStreams(self.seed, self.path + (name,))
