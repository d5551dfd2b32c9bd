"""Deterministic RNG stream derivation.

Every random draw in the package comes from a generator derived here, as
a pure function of the user seed plus integer purpose tags.  That keeps
epochs restartable: the stream for (seed, purpose, epoch, step) is the
same whether reached by running through or by resuming from a
checkpoint.
"""

from __future__ import annotations

import numpy as np

# Purpose tags; values are arbitrary but frozen (they feed SeedSequence).
INIT = 101
MASK = 102
BATCH = 103
CORPUS = 104
SUBSET = 105
CAPTION = 106
PROJECTION = 107
SPLIT = 108
COVERAGE = 109

# Constant entropy for the caption embedding projection, independent of
# the experiment seed so caption vectors are stable across runs.
PROJECTION_BASE = 776001


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for (seed, *key); pure function of its arguments."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


def spawn_child(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[int(k) for k in key]])
