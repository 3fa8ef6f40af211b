"""Counter-based random streams.

Every random draw in the package comes from a generator derived from a master
seed plus a tuple of integer keys (stage, simulation index, chain, ...). The
same keys always give the same stream, and the stream for index ``i`` never
depends on how many other indices were drawn before it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stream purposes. Kept as small integers so they can go into spawn keys.
PRIOR = 0
DATA = 1
SAMPLER = 2
BRIDGE = 3
PREDICTIVE = 4
INIT = 5


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int = 20190603
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    def child(self, *keys: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, self.path + tuple(int(k) for k in keys))

    def rng(self, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=self.path + tuple(int(k) for k in keys))
        return np.random.Generator(np.random.Philox(ss))


def as_seed(seed) -> SeedSpec:
    if isinstance(seed, SeedSpec):
        return seed
    if seed is None:
        return SeedSpec()
    return SeedSpec(int(seed))
