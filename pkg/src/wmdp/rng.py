"""Seeded random streams.

Every randomized routine in the package takes an integer seed and builds its
generator here, so the bit generator (Philox, counter based) is pinned in one
place and recorded alongside results.
"""

import numpy as np

BIT_GENERATOR = "Philox-4x64"
STREAM_VERSION = 1


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))
