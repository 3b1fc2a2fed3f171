"""Seeded synthetic 10-class image distribution.

Sample ``i`` of stream ``seed`` is drawn from ``numpy.random.default_rng([seed, i])``:

1. ``label = i % 10``.
2. Blob centre = class centre + ``N(0, 0.3^2)`` jitter per coordinate, where
   class ``c`` sits at angle ``2*pi*c/10`` on a circle of radius 2.5 around
   pixel (3.5, 3.5) (row = 3.5 - 2.5 cos, col = 3.5 + 2.5 sin).
3. Amplitude ``~ U(0.8, 1.2)``; image = amplitude * exp(-d^2 / (2 * 1.0^2))
   over the 8x8 pixel grid, plus ``N(0, 0.1^2)`` pixel noise.
4. Standardise with the fixed constants ``MEAN`` and ``STD`` below.

Draw order within a sample is jitter (2), amplitude (1), noise (64).
"""
from __future__ import annotations

import numpy as np

NUM_CLASSES = 10
SIZE = 8
RADIUS = 2.5
BLOB_SIGMA = 1.0
JITTER = 0.3
NOISE = 0.1
MEAN = 0.094
STD = 0.225

# held-out probe indices start here so train and probe never overlap
PROBE_OFFSET = 10_000_000


def class_centres():
    ang = 2.0 * np.pi * np.arange(NUM_CLASSES) / NUM_CLASSES
    return np.stack([3.5 - RADIUS * np.cos(ang), 3.5 + RADIUS * np.sin(ang)], axis=1)


_CENTRES = class_centres()
_GRID = np.stack(np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij"), axis=-1).astype(np.float64)


def sample(seed, index):
    rng = np.random.default_rng([seed, index])
    label = index % NUM_CLASSES
    centre = _CENTRES[label] + rng.normal(0.0, JITTER, size=2)
    amp = rng.uniform(0.8, 1.2)
    d2 = ((_GRID - centre) ** 2).sum(axis=-1)
    img = amp * np.exp(-d2 / (2.0 * BLOB_SIGMA ** 2)) + rng.normal(0.0, NOISE, size=(SIZE, SIZE))
    return ((img - MEAN) / STD)[None], label


def batch(seed, start, n):
    xs, ys = zip(*(sample(seed, i) for i in range(start, start + n)))
    return np.stack(xs), np.array(ys)


def probe_set(seed, n):
    """Held-out samples of the real distribution."""
    return batch(seed, PROBE_OFFSET, n)
