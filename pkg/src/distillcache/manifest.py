"""Image manifest generation and scene sub-sampling.

Dataset roots are laid out as ``<root>/<scene>/<frame image>``. Frames are
ordered lexicographically by filename unless the scene directory holds a
``frames.txt`` listing filenames in temporal order.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
ORDER_FILE = "frames.txt"


class Category(enum.Enum):
    OBJECT_CENTRIC = "object_centric"
    NAVIGATION = "navigation"
    LARGE_OUTDOOR = "large_outdoor"
    UNIFORM = "uniform"


DEFAULT_TARGET_COUNT = {
    Category.OBJECT_CENTRIC: 20,
    Category.NAVIGATION: 20,
    Category.LARGE_OUTDOOR: 10,
}


@dataclass(frozen=True)
class ManifestEntry:
    dataset_id: str
    scene_id: str
    sample_id: str
    frame_index: int
    width: int
    height: int
    image_path: str

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.dataset_id, self.scene_id, self.frame_index)


@dataclass(frozen=True)
class SamplingPolicy:
    """Sub-sampling and windowing rule for one scene category.

    For the content-driven categories the stride is ``max(1, n // target_count)``;
    ``UNIFORM`` uses ``stride`` verbatim.
    """

    category: Category = Category.UNIFORM
    views_per_sample: int = 20
    target_count: Optional[int] = None
    stride: int = 1
    overlap: bool = False

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))
        if self.views_per_sample < 2:
            raise ValueError("views_per_sample must be >= 2")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.target_count is not None and self.target_count < 1:
            raise ValueError("target_count must be >= 1")

    def stride_for(self, n_frames: int) -> int:
        if self.category is Category.UNIFORM:
            return self.stride
        target = self.target_count or DEFAULT_TARGET_COUNT[self.category]
        return max(1, n_frames // target)


@dataclass(frozen=True)
class SampleSpec:
    sample_id: str
    entries: tuple[ManifestEntry, ...]

    @property
    def image_paths(self) -> list[str]:
        return [e.image_path for e in self.entries]


def _scene_frames(scene_dir: Path) -> list[Path]:
    order = scene_dir / ORDER_FILE
    if order.is_file():
        names = [ln.strip() for ln in order.read_text().splitlines() if ln.strip()]
        return [scene_dir / n for n in names]
    return sorted((p for p in scene_dir.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
                  key=lambda p: p.name)


def image_size(path: Path) -> tuple[int, int]:
    """(width, height) from the file header; pixel data is not decoded."""
    with Image.open(path) as im:
        return im.size


def _scan_root(dataset_id: str, root) -> list[ManifestEntry]:
    root = Path(root)
    try:
        scenes = sorted(p for p in root.iterdir() if p.is_dir())
    except OSError as e:
        raise OSError(f"cannot read dataset root {root}: {e.strerror or e}") from e

    entries = []
    for scene in scenes:
        index = 0
        for frame in _scene_frames(scene):
            try:
                width, height = image_size(frame)
            except (OSError, UnidentifiedImageError) as e:
                log.warning("skipping %s: unreadable image header (%s)", frame, e)
                continue
            entries.append(ManifestEntry(
                dataset_id=dataset_id,
                scene_id=scene.name,
                sample_id=f"{dataset_id}/{scene.name}/{frame.stem}",
                frame_index=index,
                width=width,
                height=height,
                image_path=os.path.abspath(frame),
            ))
            index += 1
    return entries


def build_manifest(roots: Sequence[tuple[str, str]], workers: int = 1) -> list[ManifestEntry]:
    """Index every image under the given ``(dataset_id, directory)`` roots."""
    if workers > 1 and len(roots) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda r: _scan_root(*r), roots))
    else:
        parts = [_scan_root(*r) for r in roots]
    entries = sorted((e for part in parts for e in part), key=lambda e: e.key)
    seen = set()
    for e in entries:
        if e.key in seen:
            raise ValueError(f"duplicate manifest key {e.key}")
        seen.add(e.key)
    return entries


def group_scenes(entries: Iterable[ManifestEntry]) -> dict[tuple[str, str], list[ManifestEntry]]:
    scenes: dict[tuple[str, str], list[ManifestEntry]] = {}
    for e in entries:
        scenes.setdefault((e.dataset_id, e.scene_id), []).append(e)
    for frames in scenes.values():
        frames.sort(key=lambda e: e.frame_index)
    return scenes


def subsample_scene(entries: Sequence[ManifestEntry], policy: SamplingPolicy) -> list[ManifestEntry]:
    if not entries:
        raise ValueError("cannot sub-sample an empty scene")
    return list(entries[::policy.stride_for(len(entries))])


def make_samples(entries: Sequence[ManifestEntry], policy: SamplingPolicy) -> list[SampleSpec]:
    """Cut a (sub-sampled) scene into contiguous windows of ``views_per_sample``.

    Windows do not overlap unless ``policy.overlap`` is set (then they advance
    by half a window). A trailing partial window is dropped.
    """
    n = policy.views_per_sample
    if len(entries) < n:
        if entries:
            log.info("scene %s/%s has %d frames, fewer than %d; no samples",
                     entries[0].dataset_id, entries[0].scene_id, len(entries), n)
        return []
    step = max(1, n // 2) if policy.overlap else n
    samples = []
    for start in range(0, len(entries) - n + 1, step):
        window = tuple(entries[start:start + n])
        first = window[0]
        samples.append(SampleSpec(
            f"{first.dataset_id}/{first.scene_id}/{first.frame_index}", window))
    return samples


def samples_from_manifest(entries: Sequence[ManifestEntry],
                          policy: SamplingPolicy) -> list[SampleSpec]:
    samples = []
    for _, frames in sorted(group_scenes(entries).items()):
        samples.extend(make_samples(subsample_scene(frames, policy), policy))
    return samples


# -- JSON Lines I/O ----------------------------------------------------------

def _dump_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=False, ensure_ascii=False, separators=(",", ":"))


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for e in entries:
            f.write(_dump_line(asdict(e)) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as f:
        return [ManifestEntry(**json.loads(line)) for line in f if line.strip()]


def write_samples(path, samples: Iterable[SampleSpec]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            f.write(_dump_line({"sample_id": s.sample_id, "image_paths": s.image_paths}) + "\n")


def read_samples(path) -> list[dict]:
    """Sample list rows as plain dicts: ``{"sample_id", "image_paths"}``."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
