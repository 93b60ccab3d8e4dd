"""Independent random streams derived from one integer seed.

Each subsystem gets its own counter-based Philox generator keyed by
``(seed, stream, *extra)`` so that, e.g., changing the number of shuffles
never perturbs parameter initialisation.
"""

import numpy as np

STREAMS = {"init": 1, "shuffle": 2, "synth": 3, "split": 4, "gradcheck": 5}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), STREAMS[name], *map(int, extra)])
    return np.random.Generator(np.random.Philox(key))
