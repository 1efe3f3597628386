"""Dense-map domain types and pixel-level primitives.

Every map is a numpy array in row-major (H, W[, 3]) layout. Arrays handed to
the constructors are copied and frozen, so instances can be shared freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class DegenerateSampleError(ValueError):
    """Raised when a reduction runs over an empty validity mask."""


class Frame(enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointMap:
    data: np.ndarray
    frame: Frame = Frame.GLOBAL

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"point map must be (H, W, 3), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("point map contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "frame", Frame(self.frame))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class ConfidenceMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"confidence map must be (H, W), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("confidence map contains non-finite values")
        if np.any(data < 0):
            raise ValueError("confidence map contains negative values")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ValidityMask:
    bits: np.ndarray
    valid_count: int = field(default=-1)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be (H, W), got {bits.shape}")
        bits = bits.astype(bool)
        count = int(np.count_nonzero(bits))
        if self.valid_count not in (-1, count):
            raise ValueError(
                f"valid_count {self.valid_count} disagrees with {count} set bits"
            )
        object.__setattr__(self, "bits", _frozen(bits))
        object.__setattr__(self, "valid_count", count)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def degenerate(self) -> bool:
        return self.valid_count == 0


@dataclass(frozen=True)
class View:
    """One camera's worth of supervision: two point maps, two confidences, a mask."""

    global_points: PointMap
    local_points: PointMap
    global_conf: ConfidenceMap
    local_conf: ConfidenceMap
    mask: Optional[ValidityMask] = None

    @property
    def resolution(self) -> tuple[int, int]:
        return self.global_points.resolution


@dataclass(frozen=True)
class ViewSet:
    views: tuple[View, ...]

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError("a view set needs at least one view")
        res = views[0].resolution
        for k, v in enumerate(views):
            shapes = [v.global_points.resolution, v.local_points.resolution,
                      v.global_conf.resolution, v.local_conf.resolution]
            if v.mask is not None:
                shapes.append(v.mask.resolution)
            if any(tuple(s) != tuple(res) for s in shapes):
                raise ValueError(f"view {k} resolution mismatch: {shapes} vs {res}")
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, k: int) -> View:
        return self.views[k]

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.views[0].resolution)

    @classmethod
    def from_arrays(cls, global_points, local_points, global_conf, local_conf,
                    masks=None) -> "ViewSet":
        """Build from stacked (N, H, W[, 3]) arrays; ``masks`` is (N, H, W) bool or None."""
        n = len(global_points)
        views = []
        for k in range(n):
            mask = None if masks is None else ValidityMask(masks[k])
            views.append(View(
                PointMap(global_points[k], Frame.GLOBAL),
                PointMap(local_points[k], Frame.LOCAL),
                ConfidenceMap(global_conf[k]),
                ConfidenceMap(local_conf[k]),
                mask,
            ))
        return cls(tuple(views))

    def stacked(self) -> dict[str, np.ndarray]:
        """Return the view-major stacked arrays (masks only if every view has one)."""
        out = {
            "global_points": np.stack([v.global_points.data for v in self.views]),
            "local_points": np.stack([v.local_points.data for v in self.views]),
            "global_conf": np.stack([v.global_conf.data for v in self.views]),
            "local_conf": np.stack([v.local_conf.data for v in self.views]),
        }
        if all(v.mask is not None for v in self.views):
            out["masks"] = np.stack([v.mask.bits for v in self.views])
        return out


def _bilinear_axis(n_src: int, n_dst: int):
    # pixel-center alignment: x_src = (x_dst + 0.5) * n_src / n_dst - 0.5
    x = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    x = np.clip(x, 0.0, n_src - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = x - lo
    return lo, hi, frac


def resample_bilinear(a: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Pixel-center-aligned bilinear resampling of an (H, W, ...) array.

    Accumulates in float64 and returns float64.
    """
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ValueError(f"target resolution must be positive, got {target}")
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[:2]
    if h < 1 or w < 1:
        raise ValueError(f"source resolution must be positive, got {(h, w)}")
    if (h, w) == (th, tw):
        return a.copy()

    lo, hi, fx = _bilinear_axis(w, tw)
    fx = fx.reshape((1, tw) + (1,) * (a.ndim - 2))
    rows = _lerp(a[:, lo], a[:, hi], fx)

    lo, hi, fy = _bilinear_axis(h, th)
    fy = fy.reshape((th, 1) + (1,) * (a.ndim - 2))
    return _lerp(rows[lo], rows[hi], fy)


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # the clamp only removes rounding overshoot, keeping outputs inside the source envelope
    return np.clip(a + (b - a) * t, np.minimum(a, b), np.maximum(a, b))


def downsample_bilinear(m: Union[PointMap, ConfidenceMap], target: tuple[int, int]):
    """Resample a point or confidence map to ``target`` = (height, width).

    The result keeps the source dtype. Masks are never resampled; re-threshold
    the resampled local confidence instead.
    """
    out = resample_bilinear(m.data, target).astype(m.data.dtype)
    if isinstance(m, PointMap):
        return PointMap(out, m.frame)
    if isinstance(m, ConfidenceMap):
        return ConfidenceMap(out)
    raise TypeError(f"cannot resample {type(m).__name__}")


def threshold_mask(local_conf: ConfidenceMap, tau: float) -> ValidityMask:
    """Pixels with confidence strictly below ``tau`` are masked out."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    return ValidityMask(~(local_conf.data < tau))


def masked_mean_norm(points: Union[PointMap, np.ndarray],
                     mask: Union[ValidityMask, np.ndarray]) -> float:
    """Mean Euclidean norm of the points selected by ``mask``."""
    p = points.data if isinstance(points, PointMap) else np.asarray(points)
    bits = mask.bits if isinstance(mask, ValidityMask) else np.asarray(mask, bool)
    if p.shape[:-1] != bits.shape:
        raise ValueError(f"resolution mismatch: {p.shape[:-1]} vs {bits.shape}")
    count = int(np.count_nonzero(bits))
    if count == 0:
        raise DegenerateSampleError("mean norm over an empty mask")
    norms = np.linalg.norm(p[bits].astype(np.float64), axis=-1)
    return float(norms.sum() / count)


def stack_masks(masks: Sequence[ValidityMask]) -> np.ndarray:
    return np.stack([m.bits for m in masks])
