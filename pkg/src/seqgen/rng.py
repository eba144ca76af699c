"""Counter-based random streams.

Every random draw in the toolkit is keyed by (seed, purpose, counters...)
through Philox, so any value can be regenerated in isolation: results do
not depend on draw order, batch composition, or scheduling. This is what
makes training runs and batch evaluation bit-reproducible.
"""

import numpy as np

# Fixed purpose ids; the purpose string is part of the key, so streams for
# different uses never collide even with equal counters.
_PURPOSES = {
    "init": 1,       # weight initialization
    "eps": 2,        # posterior reparameterization noise
    "prior": 3,      # prior draws during ancestral sampling
    "pixel": 4,      # Bernoulli pixel sampling of generated images
    "binarize": 5,   # stochastic binarization of grayscale data
    "patch": 6,      # randomized-attention patch placement
    "loc": 7,        # error-attention location sampling
    "batch": 8,      # minibatch index selection
    "eval": 9,       # evaluation-subset index selection
    "data": 10,      # synthetic dataset construction
    "split": 11,     # train/test split shuffling
}

_MASK64 = (1 << 64) - 1


class RngStream:
    """Deterministic family of generators derived from one integer seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def generator(self, purpose: str, *counters: int) -> np.random.Generator:
        """Fresh generator for (purpose, counters); identical args, identical stream."""
        if purpose not in _PURPOSES:
            raise ValueError(f"unknown rng purpose {purpose!r}")
        if len(counters) > 4:
            raise ValueError("at most 4 counters supported")
        key = np.array([self.seed, _PURPOSES[purpose]], dtype=np.uint64)
        ctr = np.zeros(4, dtype=np.uint64)
        for i, c in enumerate(counters):
            ctr[i] = int(c) & _MASK64
        return np.random.Generator(np.random.Philox(counter=ctr, key=key))

    def normal(self, shape, purpose: str, *counters: int, dtype=np.float64):
        g = self.generator(purpose, *counters)
        return g.standard_normal(size=shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low, high, shape, purpose: str, *counters: int, dtype=np.float64):
        g = self.generator(purpose, *counters)
        return g.uniform(low, high, size=shape).astype(dtype, copy=False)

    def integers(self, low, high, shape, purpose: str, *counters: int):
        g = self.generator(purpose, *counters)
        return g.integers(low, high, size=shape)
