"""Deterministic random streams.

All randomness in the package flows through counter-based Philox generators
keyed by (seed, *path). Streams with different paths are statistically
independent, and the same (seed, path) always replays the same sequence, which
is what makes training runs and synthetic corpora bit-reproducible.
"""

import numpy as np

# stream path tags; keep stable, they are part of reproducibility
INIT = 1  # model parameter init
POWER = 2  # power iteration start vector
DATA = 3  # synthetic corpus (followed by split id, sample idx)
BATCH = 4  # minibatch index sampling
CHECK = 5  # test / selfcheck instances


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return a Generator fully determined by ``seed`` and ``path``."""
    key = (int(seed),) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
