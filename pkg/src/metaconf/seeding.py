"""Named random substreams derived from one run seed.

Each consumer (data generation, epoch splitting, episode sampling,
parameter init) gets its own child generator, so adding draws to one
stream never perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    )
