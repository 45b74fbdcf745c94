"""Seeded randomness.

Every stochastic operation in the package draws from a Philox counter-based
bit generator keyed by the caller's integer seed. Philox output is fixed by
the algorithm (Philox-4x64-10), so sampling, k-means seeding, and synthetic
data generation reproduce bit-for-bit across platforms for a given numpy
version. No module touches numpy's global RNG state.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Return a fresh Philox-backed generator keyed by `seed`."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))
