"""Seeded, splittable random streams.

Philox is a counter-based generator, so child streams spawned from one seed
never overlap and every dropout mask or shuffle is reproducible from the
run seed alone.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def split(seed: int, n: int) -> list[np.random.Generator]:
    """Return ``n`` independent generators derived from ``seed``."""
    return [make_rng(child) for child in np.random.SeedSequence(int(seed)).spawn(n)]


def derive(seed: int, *path: int) -> np.random.Generator:
    """Generator keyed by ``seed`` plus an integer path, e.g. (model_index, epoch)."""
    return make_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)))
