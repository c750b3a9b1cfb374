"""Seeded random streams.

Every random draw in the package goes through a Philox counter-based
generator, so a given integer seed reproduces the same stream on any
platform numpy supports.
"""
import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))
