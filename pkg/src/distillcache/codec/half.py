"""IEEE 754 binary16 conversion on raw bit patterns.

Encoding is round-to-nearest-even with saturation: anything that would round
past the largest finite half (65504) clamps to +/-65504 instead of becoming
infinity. Non-finite inputs are rejected. The rounding itself is numpy's
float32 -> float16 cast.
"""

from __future__ import annotations

import numpy as np

HALF_MAX = 65504.0
HALF_MAX_BITS = 0x7BFF
HALF_EXP_MASK = 0x7C00


class InvalidDataError(ValueError):
    pass


def f16_encode(x) -> np.ndarray:
    """float32 values -> uint16 binary16 bit patterns (array in, array out)."""
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise InvalidDataError("cannot encode NaN or infinity as binary16")
    # clamping first keeps the cast from overflowing to infinity
    return np.clip(x, -HALF_MAX, HALF_MAX).astype(np.float16).view(np.uint16)


def f16_decode(h) -> np.ndarray:
    """uint16 binary16 bit patterns -> float32 values."""
    return np.asarray(h, dtype=np.uint16).view(np.float16).astype(np.float32)


def is_finite_half(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.uint16)
    return (h & HALF_EXP_MASK) != HALF_EXP_MASK
