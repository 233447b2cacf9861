"""Per-replicate random streams.

Every replicate draws from a Philox counter-based generator whose 128-bit
key is ``(master_seed, replicate_index)``.  A stream therefore depends on
nothing but those two integers, whatever order or thread runs it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replicate_index: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        if not 0 <= self.replicate_index <= MASK64:
            raise ValueError("replicate_index must be a nonnegative 64-bit integer")

    def generator(self) -> np.random.Generator:
        key = (self.master_seed << 64) | self.replicate_index
        return np.random.Generator(np.random.Philox(key=key))


def as_seed(seed) -> SeedSpec:
    if isinstance(seed, SeedSpec):
        return seed
    return SeedSpec(int(seed), 0)
