"""Deterministic seed derivation.

Every stochastic step in the simulator draws from its own generator, keyed
by a purpose tag plus the identifying integers of the step (run seed,
client id, round).  Independent streams keep client updates reproducible
regardless of execution order, which is what makes threaded rounds and
sequential rounds bit-identical.
"""

from __future__ import annotations

import numpy as np

# Purpose tags.  Values are arbitrary but frozen: changing them changes
# every derived stream.
TAG_INIT = 101
TAG_DATA = 102
TAG_PARTITION = 103
TAG_SHIFT = 104
TAG_CLIENT = 105
TAG_TUNE = 106
TAG_TRAIN = 107
TAG_MASK = 108


def derive_rng(*keys: int) -> np.random.Generator:
    """Return a generator keyed by the given integers."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    """Collapse a key tuple into a single integer seed."""
    seq = np.random.SeedSequence([int(k) for k in keys])
    return int(seq.generate_state(1, np.uint64)[0])
