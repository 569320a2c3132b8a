"""Per-stream random generators.

Every independent unit of work (bootstrap replicate, simulated pool) gets its
own Philox counter-based generator keyed by ``SeedSequence(seed,
spawn_key=(stream,))``. Results therefore depend only on (seed, stream), not
on execution order or the number of workers.
"""

import numpy as np

RNG_ALGORITHM = "numpy.random.Philox(SeedSequence(seed, spawn_key=(stream,)))"


def stream(seed: int, index: int) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seed and stream index must be nonnegative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))
