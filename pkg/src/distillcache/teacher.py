"""Teacher boundary and cache construction.

Teacher outputs arrive either as raw float32 dumps written by an external
framework or from the synthetic generator below. Either way they go through
the same per-sample pipeline: resample to the cache resolution, threshold the
local confidence into a validity mask, quantize to binary16, RLE the masks and
pack a D3RC archive.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .codec import CacheSample, InvalidDataError, pack_archive
from .geometry import (
    ConfidenceMap,
    Frame,
    PointMap,
    View,
    ViewSet,
    downsample_bilinear,
    threshold_mask,
)

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = (224, 518)
DEFAULT_TAU = 0.3
PATCH_SIZE = 14

DESCRIPTOR = "descriptor.json"
DUMP_FILES = {
    "global_points": ("global_points.f32", 3),
    "local_points": ("local_points.f32", 3),
    "global_conf": ("global_conf.f32", 1),
    "local_conf": ("local_conf.f32", 1),
}


class ConfigError(ValueError):
    pass


class CorruptDumpError(ValueError):
    pass


class MissingDumpError(FileNotFoundError):
    pass


def check_target_resolution(res: Sequence[int]) -> tuple[int, int]:
    h, w = (int(x) for x in res)
    if h < 1 or w < 1 or h % PATCH_SIZE or w % PATCH_SIZE:
        raise ConfigError(
            f"target resolution {h}x{w} must be positive and divisible by {PATCH_SIZE}"
        )
    return h, w


# -- dump format -------------------------------------------------------------

def write_teacher_dump(views: ViewSet, directory, sample_id: str) -> Path:
    """Write ``views`` in the float32 teacher dump layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = views.stacked()
    h, w = views.resolution
    for name, (fname, _) in DUMP_FILES.items():
        np.ascontiguousarray(arrays[name], dtype="<f4").tofile(directory / fname)
    desc = {"sample_id": sample_id, "n_views": len(views), "height": h, "width": w}
    (directory / DESCRIPTOR).write_text(json.dumps(desc, indent=2) + "\n")
    return directory


def read_teacher_dump(directory) -> ViewSet:
    directory = Path(directory)
    desc_path = directory / DESCRIPTOR
    if not desc_path.is_file():
        raise MissingDumpError(f"no teacher dump descriptor at {desc_path}")
    try:
        desc = json.loads(desc_path.read_text())
        n, h, w = int(desc["n_views"]), int(desc["height"]), int(desc["width"])
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptDumpError(f"{desc_path}: unreadable descriptor ({e})") from e
    if n < 1 or h < 1 or w < 1:
        raise CorruptDumpError(f"{desc_path}: non-positive dimensions {n}x{h}x{w}")

    arrays = {}
    for name, (fname, ch) in DUMP_FILES.items():
        path = directory / fname
        if not path.is_file():
            raise CorruptDumpError(f"missing array file {path}")
        expected = n * h * w * ch * 4
        size = path.stat().st_size
        if size != expected:
            raise CorruptDumpError(
                f"{path}: {size} bytes, descriptor implies {expected} "
                f"({n} views x {h}x{w}x{ch} float32)"
            )
        shape = (n, h, w, 3) if ch == 3 else (n, h, w)
        arrays[name] = np.fromfile(path, dtype="<f4").astype(np.float32).reshape(shape)

    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise InvalidDataError(f"{directory}: non-finite values in {name}")
    for name in ("global_conf", "local_conf"):
        if np.any(arrays[name] < 0):
            raise InvalidDataError(f"{directory}: negative confidence in {name}")
    return ViewSet.from_arrays(arrays["global_points"], arrays["local_points"],
                               arrays["global_conf"], arrays["local_conf"])


def dump_nbytes(directory) -> int:
    directory = Path(directory)
    return sum((directory / f).stat().st_size for f, _ in DUMP_FILES.values())


# -- synthetic teacher -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticScene:
    """Parameters of a reproducible stand-in for real teacher output.

    Geometry is a height field z = depth + amplitude * sin(f x) cos(f y) seen
    through per-view windows. Each view's local frame is its global frame
    under a random rigid motion. Confidence decays as a Gaussian of the
    normalized image radius down to ``c_floor``.
    """

    seed: int
    n_views: int = 2
    height: int = 32
    width: int = 48
    depth: float = 3.0
    extent: tuple[float, float] = (2.0, 1.5)
    amplitude: float = 0.2
    frequency: float = 2.0
    max_shift: float = 0.3
    max_rotation: float = 0.3
    max_translation: float = 0.5
    identity_offsets: bool = False
    c_max: float = 3.0
    c_floor: float = 0.1
    falloff: float = 0.6
    global_falloff_scale: float = 1.2


def _pixel_grid(height: int, width: int):
    u = (2.0 * np.arange(width) + 1.0) / width - 1.0
    v = (2.0 * np.arange(height) + 1.0) / height - 1.0
    return np.meshgrid(u, v)


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def radial_confidence(scene: SyntheticScene, falloff: Optional[float] = None) -> np.ndarray:
    f = scene.falloff if falloff is None else falloff
    u, v = _pixel_grid(scene.height, scene.width)
    r2 = u * u + v * v
    return scene.c_floor + (scene.c_max - scene.c_floor) * np.exp(-r2 / (f * f))


def analytic_masked_fraction(scene: SyntheticScene, tau: float) -> float:
    """Fraction of the image where the local radial confidence falls below tau.

    The valid region is the disk r <= r_tau clipped to the normalized square
    [-1, 1]^2, whose area has a closed form.
    """
    q = (tau - scene.c_floor) / (scene.c_max - scene.c_floor)
    if q <= 0:
        return 0.0
    if q > 1:
        return 1.0
    r = scene.falloff * np.sqrt(-np.log(q))
    if r <= 1:
        area = np.pi * r * r
    elif r < np.sqrt(2):
        area = np.pi * r * r - 4 * (r * r * np.arccos(1 / r) - np.sqrt(r * r - 1))
    else:
        area = 4.0
    return float(1.0 - area / 4.0)


def synth_teacher(scene: SyntheticScene) -> ViewSet:
    if scene.n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(scene.seed)
    u, v = _pixel_grid(scene.height, scene.width)
    ex, ey = scene.extent
    conf_l = radial_confidence(scene).astype(np.float32)
    conf_g = radial_confidence(scene, scene.falloff * scene.global_falloff_scale).astype(np.float32)

    views = []
    for _ in range(scene.n_views):
        shift = rng.uniform(-scene.max_shift, scene.max_shift)
        x = ex * (u + shift)
        y = ey * v
        z = scene.depth + scene.amplitude * np.sin(scene.frequency * x) * np.cos(scene.frequency * y)
        pg = np.stack([x, y, z], axis=-1)
        if scene.identity_offsets:
            pl = pg
        else:
            rot = _rotation(rng.normal(size=3), rng.uniform(-scene.max_rotation, scene.max_rotation))
            t = rng.uniform(-scene.max_translation, scene.max_translation, size=3)
            pl = pg @ rot.T + t
        views.append(View(
            PointMap(pg.astype(np.float32), Frame.GLOBAL),
            PointMap(pl.astype(np.float32), Frame.LOCAL),
            ConfidenceMap(conf_g),
            ConfidenceMap(conf_l),
        ))
    return ViewSet(tuple(views))


def derive_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{sample_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# -- cache pipeline ----------------------------------------------------------

def align_and_filter(teacher: ViewSet, target_res=DEFAULT_RESOLUTION,
                     tau: float = DEFAULT_TAU) -> ViewSet:
    """Resample every map to ``target_res`` then threshold the local confidence.

    Output stays in float32, the precision handed to the quantizer.
    """
    target = check_target_resolution(target_res)
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    views = []
    for v in teacher:
        cl = downsample_bilinear(v.local_conf, target)
        views.append(View(
            downsample_bilinear(v.global_points, target),
            downsample_bilinear(v.local_points, target),
            downsample_bilinear(v.global_conf, target),
            cl,
            threshold_mask(cl, tau),
        ))
    return ViewSet(tuple(views))


def build_cache_sample(teacher: ViewSet, target_res=DEFAULT_RESOLUTION,
                       tau: float = DEFAULT_TAU) -> bytes:
    """Run align -> filter -> quantize -> RLE -> pack; returns archive bytes."""
    return pack_archive(CacheSample.from_viewset(align_and_filter(teacher, target_res, tau)))


def archive_name(sample_id: str) -> str:
    return sample_id.replace("/", "__") + ".d3rc"


@dataclass(frozen=True)
class CacheJob:
    sample_id: str
    n_views: int
    dump_dir: Optional[str] = None
    synthetic_seed: Optional[int] = None
    teacher_res: Optional[tuple[int, int]] = None

    def load(self) -> ViewSet:
        if self.dump_dir is not None:
            return read_teacher_dump(self.dump_dir)
        h, w = self.teacher_res
        return synth_teacher(SyntheticScene(self.synthetic_seed, self.n_views, h, w))


def _run_job(job: CacheJob, out_dir: str, target_res, tau) -> dict:
    teacher = job.load()
    aligned = align_and_filter(teacher, target_res, tau)
    sample = CacheSample.from_viewset(aligned)
    data = pack_archive(sample)
    path = Path(out_dir) / archive_name(job.sample_id)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    h, w = sample.resolution
    masked = sum(h * w - m.valid_count for m in sample.masks)
    if job.dump_dir:
        bytes_in = dump_nbytes(job.dump_dir)
    else:
        th, tw = teacher.resolution
        bytes_in = len(teacher) * th * tw * 8 * 4  # 3 + 3 + 1 + 1 float32 per pixel
    return {
        "sample_id": job.sample_id,
        "archive": path.name,
        "n_views": sample.n_views,
        "bytes_in": bytes_in,
        "bytes_out": len(data),
        "pixels": sample.n_views * h * w,
        "masked_pixels": masked,
        "degenerate_views": sample.degenerate_views,
        "synthetic_seed": job.synthetic_seed,
    }


def build_cache(jobs: Sequence[CacheJob], out_dir, target_res=DEFAULT_RESOLUTION,
                tau: float = DEFAULT_TAU, workers: int = 1) -> dict:
    """Build one archive per job; returns the run report.

    Jobs are independent, so ``workers > 1`` fans out over processes. Results
    are collected in job order so the report does not depend on scheduling.
    """
    target = check_target_resolution(target_res)
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    if workers == 1 or len(jobs) <= 1:
        rows = [_run_job(j, str(out_dir), target, tau) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_job, j, str(out_dir), target, tau) for j in jobs]
            rows = [f.result() for f in futures]
    wall = time.perf_counter() - start

    for row in rows:
        if row["degenerate_views"]:
            log.warning("sample %s has degenerate views %s", row["sample_id"],
                        row["degenerate_views"])
    pixels = sum(r["pixels"] for r in rows)
    masked = sum(r["masked_pixels"] for r in rows)
    return {
        "samples_processed": len(rows),
        "resolution": list(target),
        "tau": tau,
        "pixels": pixels,
        "masked_pixels": masked,
        "masked_fraction": masked / pixels if pixels else 0.0,
        "degenerate_views": sum(len(r["degenerate_views"]) for r in rows),
        "bytes_in": sum(r["bytes_in"] for r in rows),
        "bytes_out": sum(r["bytes_out"] for r in rows),
        "samples": rows,
        "timing": {"wall_time_s": wall},
    }
