"""Seeded parameter initializers. All randomness flows through one Generator."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import truncnorm

BACKBONE_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = BACKBONE_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """He-normal for ``[in, out]`` weights (fan_in is the leading extent)."""
    return rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / shape[0])
    return rng.uniform(-bound, bound, size=shape)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
