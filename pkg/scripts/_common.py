"""Shared held-out pair construction for the experiment scripts."""

import numpy as np

from stablekp.geometry import apply_transform, random_se3
from stablekp.synthetic import make_resampled_pair

KINDS = ("box", "l_bracket", "pyramid")


def held_out_pairs(n: int, seed: int = 99):
    """Independent resamplings of one random shape, the second under a full random motion."""
    pairs, areas = [], []
    for i in range(n):
        X, Y, shape = make_resampled_pair(KINDS[i % 3], 1024, seed=[seed, i])
        T = random_se3("full", 1.0, np.random.default_rng([seed - 1, i]))
        pairs.append((X, apply_transform(Y, T), T))
        areas.append(shape.areas().sum())
    return pairs, np.array(areas)
