"""Derivation of independent, named RNG streams from one run seed.

Every stochastic consumer (weight init, shuffling, dropout, synthetic data)
gets its own stream so that enabling or disabling one consumer never shifts
the draws seen by another.  That isolation is what lets the adversarial loop
with the adversarial parts switched off reproduce supervised training bit for
bit.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "generator_init": 0,
    "discriminator_init": 1,
    "shuffle": 2,
    "shuffle_disc": 3,
    "dropout": 4,
    "dropout_disc": 5,
    "synthetic": 6,
    "gradcheck": 7,
}


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream; same (seed, name) always yields the same stream."""
    if name not in _STREAMS:
        raise KeyError(f"unknown rng stream {name!r}; known: {sorted(_STREAMS)}")
    return np.random.default_rng([int(seed), _STREAMS[name]])
