"""Seeded random streams.

Every stochastic routine draws from a Philox4x64-10 counter-based generator
(:class:`numpy.random.Philox`) keyed directly by ``seed + (stream << 64)``,
bypassing ``SeedSequence`` hashing so that a (seed, stream) pair names one
fixed sequence.  Independent sub-streams (per frame, per stage) use distinct
``stream`` ids rather than sequential draws from a shared generator.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    seed = int(seed) & _MASK64
    stream = int(stream) & _MASK64
    return np.random.Generator(np.random.Philox(key=seed | (stream << 64)))


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    bitgen.state = state
    return np.random.Generator(bitgen)
