"""Run-length encoding of boolean validity masks.

A mask is scanned row-major and stored as its first bit plus the lengths of
alternating runs. Every run is non-empty, so each mask has exactly one
encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import ValidityMask


class CorruptDataError(ValueError):
    pass


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    first_value: bool
    run_lengths: np.ndarray

    def __post_init__(self):
        runs = np.asarray(self.run_lengths, dtype=np.uint32)
        runs.setflags(write=False)
        object.__setattr__(self, "run_lengths", runs)
        object.__setattr__(self, "first_value", bool(self.first_value))

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def valid_count(self) -> int:
        start = 0 if self.first_value else 1
        return int(self.run_lengths[start::2].sum(dtype=np.int64))

    def check(self):
        """Raise CorruptDataError unless the runs tile the mask exactly."""
        runs = self.run_lengths
        total = int(runs.sum(dtype=np.int64))
        if total != self.n_pixels:
            raise CorruptDataError(
                f"run lengths sum to {total}, expected {self.height}x{self.width}"
                f"={self.n_pixels}"
            )
        if np.any(runs == 0):
            raise CorruptDataError("zero-length run")

    def __eq__(self, other):
        if not isinstance(other, RleMask):
            return NotImplemented
        return (self.height, self.width, self.first_value) == (
            other.height, other.width, other.first_value
        ) and np.array_equal(self.run_lengths, other.run_lengths)

    __hash__ = None


def rle_encode(mask) -> RleMask:
    bits = mask.bits if isinstance(mask, ValidityMask) else np.asarray(mask, bool)
    h, w = bits.shape
    flat = bits.reshape(-1)
    if flat.size == 0:
        return RleMask(h, w, False, np.zeros(0, np.uint32))
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    return RleMask(h, w, bool(flat[0]), np.diff(bounds).astype(np.uint32))


def rle_decode(r: RleMask) -> ValidityMask:
    r.check()
    values = np.zeros(len(r.run_lengths), dtype=bool)
    values[0::2] = r.first_value
    values[1::2] = not r.first_value
    flat = np.repeat(values, r.run_lengths.astype(np.int64))
    return ValidityMask(flat.reshape(r.height, r.width))
