"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_epsilon(epsilon: float) -> float:
    """Validate an error rate, which must lie strictly inside (0, 1)."""
    epsilon = float(epsilon)
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    return epsilon


def check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return temperature


def check_positive_int(value: int, name: str) -> int:
    value = int(value)
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return value


def as_rng(seed: int | np.random.Generator | np.random.SeedSequence) -> np.random.Generator:
    """Return `seed` unchanged if already a Generator, else seed a fresh one."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
