"""Counter-based seeded random streams.

A stream is addressed by a root seed plus integer keys, e.g.
``substream(seed, epoch, slot)``; draws never depend on execution order.
"""

import numpy as np


def substream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))
