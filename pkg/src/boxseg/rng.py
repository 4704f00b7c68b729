"""Deterministic random streams.

Every random draw in the package comes from a Philox counter-based
generator keyed through SeedSequence with explicit integer tags, so a
(seed, purpose, index) triple always yields the same bits on any
platform. Stream tags keep the purposes independent.
"""

import numpy as np

STREAM_INIT = 1      # model parameter initialization
STREAM_DATA = 2      # synthetic sample generation
STREAM_PERTURB = 3   # teacher-input perturbation
STREAM_ORDER = 4     # epoch shuffling


def rng_for(*keys):
    """Philox generator keyed by a tuple of integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))
