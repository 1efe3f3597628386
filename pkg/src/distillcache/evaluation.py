"""Per-view reconstruction metrics: scale factor, accuracy and completeness.

Accuracy is the median distance from each predicted point to its nearest
ground-truth point, completeness the median in the other direction; both are
reported x100 in ground-truth units. The scale factor is the ratio of median
centroid-relative norms, ground truth over prediction, so 1.0 means the
prediction is already metric.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DegenerateSampleError

METRIC_SCALE = 100.0
COUNT_HEADER = struct.Struct("<Q")


@dataclass(frozen=True)
class CloudPair:
    predicted: np.ndarray
    ground_truth: np.ndarray
    unit_note: str = "meters"

    def __post_init__(self):
        for name in ("predicted", "ground_truth"):
            a = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 3)
            if len(a) == 0:
                raise ValueError(f"{name} cloud is empty")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} cloud has non-finite points")
            object.__setattr__(self, name, a)


@dataclass(frozen=True)
class ReconMetrics:
    accuracy: float
    completeness: float
    scale_factor: float


def _median_centered_norm(points: np.ndarray) -> float:
    return float(np.median(np.linalg.norm(points - points.mean(axis=0), axis=1)))


def scale_align(pair: CloudPair) -> tuple[np.ndarray, float]:
    """Return the prediction rescaled onto the ground truth, and the factor used."""
    pred_scale = _median_centered_norm(pair.predicted)
    if pred_scale == 0:
        raise DegenerateSampleError("predicted cloud has zero median norm")
    factor = _median_centered_norm(pair.ground_truth) / pred_scale
    return pair.predicted * factor, factor


def point_distances(a: np.ndarray, b: np.ndarray, index: np.ndarray) -> np.ndarray:
    d = a - b[index]
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def nearest_distances(queries: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distance from every query point to its nearest reference point.

    The tree only picks the neighbour; the distance itself is recomputed with
    :func:`point_distances` so that results do not depend on the search
    structure.
    """
    _, idx = cKDTree(reference).query(queries, k=1)
    return point_distances(queries, reference, idx)


def accuracy_median(predicted, ground_truth) -> float:
    p = np.asarray(predicted, np.float64).reshape(-1, 3)
    g = np.asarray(ground_truth, np.float64).reshape(-1, 3)
    return METRIC_SCALE * float(np.median(nearest_distances(p, g)))


def completeness_median(predicted, ground_truth) -> float:
    return accuracy_median(ground_truth, predicted)


def evaluate_pair(pair: CloudPair) -> ReconMetrics:
    aligned, factor = scale_align(pair)
    return ReconMetrics(
        accuracy_median(aligned, pair.ground_truth),
        completeness_median(aligned, pair.ground_truth),
        factor,
    )


def evaluate_per_view(pred_points: Sequence[np.ndarray], gt_clouds: Sequence[np.ndarray],
                      masks: Optional[Sequence[np.ndarray]] = None,
                      unit_note: str = "meters") -> dict:
    """Evaluate each predicted (H, W, 3) map against its own ground-truth cloud.

    With ``masks`` the predicted cloud keeps only valid pixels. The aggregate
    row is the median of each metric across views.
    """
    if len(pred_points) != len(gt_clouds):
        raise ValueError(
            f"view count mismatch: {len(pred_points)} predicted vs {len(gt_clouds)} ground truth"
        )
    if masks is not None and len(masks) != len(pred_points):
        raise ValueError("one mask per predicted view is required")
    rows = []
    for k, (pred, gt) in enumerate(zip(pred_points, gt_clouds)):
        pred = np.asarray(pred, np.float64)
        cloud = pred[np.asarray(masks[k], bool)] if masks is not None else pred.reshape(-1, 3)
        m = evaluate_pair(CloudPair(cloud, gt, unit_note))
        rows.append({"view": k, "n_predicted": len(cloud.reshape(-1, 3)), **asdict(m)})
    agg = {
        key: float(np.median([r[key] for r in rows]))
        for key in ("accuracy", "completeness", "scale_factor")
    }
    return {"unit_note": unit_note, "metric_scale": METRIC_SCALE,
            "aggregate": "median across views", "views": rows, "median": agg}


# -- cloud files -------------------------------------------------------------

def write_cloud(path, points) -> None:
    """Binary cloud: u64 point count then count x 3 float64, little-endian."""
    p = np.ascontiguousarray(np.asarray(points, dtype="<f8").reshape(-1, 3))
    with open(path, "wb") as f:
        f.write(COUNT_HEADER.pack(len(p)))
        f.write(p.tobytes())


def read_cloud(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".xyz", ".txt"):
        return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)
    raw = path.read_bytes()
    if len(raw) < COUNT_HEADER.size:
        raise ValueError(f"{path}: missing point-count header")
    (count,) = COUNT_HEADER.unpack_from(raw)
    body = len(raw) - COUNT_HEADER.size
    if body != count * 24:
        raise ValueError(f"{path}: header says {count} points but body holds {body} bytes")
    return np.frombuffer(raw, dtype="<f8", offset=COUNT_HEADER.size).astype(np.float64).reshape(-1, 3)


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
