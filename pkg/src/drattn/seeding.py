"""Independent, named random streams derived from one global seed.

Each consumer (weight init, dropout, shuffling, augmentation choice, split
shuffling) draws from its own stream so that changing one never perturbs
another.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(_key(k) for k in keys)])


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream named by ``keys`` under ``seed``."""
    return np.random.default_rng(derive_seed(seed, *keys))
