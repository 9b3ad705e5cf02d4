"""Reproducible per-replicate random streams."""

import numpy as np


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for replicate `index` under master `seed`."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else int(rng))
