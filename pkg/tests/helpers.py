"""Shared builders for tests."""

import numpy as np

from subctrl import DensityField


def random_density(G, rng, modes=4, amplitude=0.6):
    """Smooth positive density: 1 + random low-order cosine modes, normalized."""
    x = (G.coords - G.lower) / (G.upper - G.lower)
    v = np.ones(G.size)
    for _ in range(modes):
        k = rng.integers(0, 3, size=G.dimension)
        v += amplitude / modes * rng.uniform(-1, 1) * np.prod(np.cos(np.pi * k * x), axis=1)
    return DensityField.normalized(G, v)
