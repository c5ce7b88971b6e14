"""Generators of count tensors ``n[m, y, z, b]`` with prescribed structure.

All generators return integer arrays of shape (2, p, k, B) whose member and
non-member totals agree in every (y, z) cell, so
``EvaluationSet.from_counts`` accepts them.
"""
from __future__ import annotations

import numpy as np


def random_counts(rng: np.random.Generator, p: int, k: int, B: int,
                  max_cell: int = 30, p_empty: float = 0.15) -> np.ndarray:
    """Stratified counts with sparse, frequently tied bin distributions."""
    counts = np.zeros((2, p, k, B), dtype=np.int64)
    for y in range(p):
        for z in range(k):
            if rng.random() < p_empty:
                continue
            size = int(rng.integers(1, max_cell + 1))
            mode = rng.integers(3)
            alpha = rng.choice([0.2, 1.0, 5.0])
            p_in = rng.dirichlet(np.full(B, alpha))
            counts[1, y, z] = rng.multinomial(size, p_in)
            if mode == 0:
                counts[0, y, z] = counts[1, y, z]
            elif mode == 1:
                counts[0, y, z] = rng.multinomial(size, p_in)
            else:
                counts[0, y, z] = rng.multinomial(size, rng.dirichlet(np.full(B, alpha)))
    return counts


def geo_counts(rng: np.random.Generator, p: int, k: int, B: int,
               equal_class_bias: bool = False, max_unit: int = 6,
               max_mult: int = 5) -> np.ndarray:
    """Counts whose output distribution given (y, m) is identical in every subgroup.

    Each (y, z, m) cell is an integer multiple of a per-(y, m) base vector.
    With ``equal_class_bias`` the multiples factor as ``s_z * q_y``, which
    makes ``Pr[y | z]`` the same for every subgroup.
    """
    counts = np.zeros((2, p, k, B), dtype=np.int64)
    if equal_class_bias:
        mult = np.outer(rng.integers(1, max_mult + 1, size=p), rng.integers(1, max_mult + 1, size=k))
    else:
        mult = rng.integers(0, max_mult + 1, size=(p, k))
        mult[:, rng.integers(k)] = np.maximum(mult[:, 0], 1)
    for y in range(p):
        base_in = rng.multinomial(int(rng.integers(1, max_unit + 1)) * 2, rng.dirichlet(np.ones(B)))
        total = int(base_in.sum())
        base_out = rng.multinomial(total, rng.dirichlet(np.ones(B)))
        for z in range(k):
            counts[1, y, z] = mult[y, z] * base_in
            counts[0, y, z] = mult[y, z] * base_out
    return counts


def no_overfit_counts(rng: np.random.Generator, p: int, k: int, B: int, **kw) -> np.ndarray:
    """Random counts with the member distribution copied onto non-members."""
    counts = random_counts(rng, p, k, B, **kw)
    counts[0] = counts[1]
    return counts


def random_shape(rng: np.random.Generator, max_p: int = 4, max_k: int = 4, B: int = 10):
    return int(rng.integers(1, max_p + 1)), int(rng.integers(1, max_k + 1)), B
