"""Named, counter-based random streams.

Each draw is attributable to ``(seed, stream name, index)``: the triple is
hashed into a Philox key, so streams never share state and any single draw
can be replayed without replaying its predecessors.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class Streams:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, name: str, index: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(_name_key(name), int(index)))
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, name: str, shape, index: int = 0) -> np.ndarray:
        return self.generator(name, index).standard_normal(shape)

    def child(self, name: str) -> "Streams":
        """A derived family, e.g. one per worker or restart."""
        return Streams(_name_key(f"{self.seed}/{name}") & 0x7FFF_FFFF_FFFF_FFFF)

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed})"
