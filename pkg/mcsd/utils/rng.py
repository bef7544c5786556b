"""
Counter-based random streams.

Every stochastic draw in the toolkit comes from a generator keyed by
``(base_seed, *counters)``, so a pass, layer or batch always sees the same
numbers no matter which worker thread evaluates it.
"""
from typing import Tuple
import numpy as np

# Stream families; the first spawn-key element keeps them disjoint.
GATES = 0
DROPOUT = 1
SHUFFLE = 2
INIT = 3
VERIFY = 4
DATA = 5


def stream(base_seed: int, *counters: int) -> np.random.Generator:
    """Return the generator for ``(base_seed, counters...)``."""
    if base_seed < 0:
        raise ValueError(f"seed must be non-negative, got {base_seed}")
    key: Tuple[int, ...] = tuple(int(c) for c in counters)
    return np.random.default_rng(np.random.SeedSequence(int(base_seed), spawn_key=key))
