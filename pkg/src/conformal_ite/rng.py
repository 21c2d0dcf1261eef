"""Named, counter-based random streams.

Every consumer of randomness asks for a stream by name. Streams derived from
the same seed are statistically independent, so changing how many draws one
consumer makes (e.g. the number of Monte Carlo samples) never perturbs
another consumer (e.g. the covariates of a synthetic dataset).
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    # data generation
    "covariates": 0,
    "noise0": 1,
    "noise1": 2,
    "treatment": 3,
    "coefficients": 4,
    # experiment / learners
    "test_split": 10,
    "split": 11,
    "models": 12,
    "mc": 13,
    "pit": 14,
}


def stream(seed: int, name: str, *subkey: int) -> np.random.Generator:
    """Return a Philox generator for ``(seed, name, *subkey)``."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *map(int, subkey)))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 32-bit seed for code that wants a plain integer seed."""
    return int(rng.integers(0, 2**32 - 1))
