"""Common shared helpers"""

import hashlib
import json
import math
from typing import Any, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Box parameters live on this decimal lattice so that opposite actions cancel exactly
LATTICE_DECIMALS = 9


def wrap_angle(angle: float) -> float:
    """Wrap an azimuth to [0, 2π)"""
    wrapped = math.fmod(angle, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    if wrapped >= TWO_PI:
        wrapped -= TWO_PI
    return wrapped


def signed_angle_difference(angle: float) -> float:
    """Shortest signed arc of an angle difference, in [-π, π]"""
    return math.atan2(math.sin(angle), math.cos(angle))


def quantize(value: float) -> float:
    return round(value, LATTICE_DECIMALS)


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Seeded generator; a sequence seeds a disjoint stream per (seed, tag, ...) tuple"""
    return np.random.default_rng(seed)


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_of(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()
