"""The D3RC consolidated cache archive.

Layout (all integers little-endian, see FORMAT.md for a worked hex dump)::

    0   4s  magic "D3RC"
    4   u16 version (1)
    6   u16 n_views
    8   u32 height
    12  u32 width
    16  u32 flags (bit 0: at least one view has an empty mask)
    20  u32 reserved (0)
    24  5 x (u32 offset, u32 length) section table:
        global points, local points, global conf, local conf, masks
    64  payload; each section starts on an 8-byte boundary, gaps are zero

Map sections hold binary16 bit patterns, view-major then row-major, with
3 halfwords per pixel for points and 1 for confidences. The mask section is
one record per view::

    u32 n_runs, u8 first_value, u8 degenerate, u16 reserved, n_runs x u32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..geometry import ViewSet
from .half import f16_decode, f16_encode
from .rle import CorruptDataError, RleMask, rle_decode, rle_encode

MAGIC = b"D3RC"
VERSION = 1
HEADER = struct.Struct("<4sHHIIII")
SECTION = struct.Struct("<II")
MASK_RECORD = struct.Struct("<IBBH")
HEADER_SIZE = 64
ALIGN = 8
SECTION_NAMES = ("global_points", "local_points", "global_conf", "local_conf", "masks")
MAP_CHANNELS = (3, 3, 1, 1)
FLAG_DEGENERATE = 1


class FormatError(ValueError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


@dataclass(frozen=True)
class CacheSample:
    """A stacked N-view supervision sample in storage precision.

    Map fields are uint16 binary16 bit patterns of shape (N, H, W, 3) for
    points and (N, H, W) for confidences.
    """

    global_points: np.ndarray
    local_points: np.ndarray
    global_conf: np.ndarray
    local_conf: np.ndarray
    masks: tuple[RleMask, ...]

    def __post_init__(self):
        n, h, w = self.global_conf.shape
        for name, ch in zip(SECTION_NAMES[:4], MAP_CHANNELS):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.uint16)
            expected = (n, h, w, 3) if ch == 3 else (n, h, w)
            if a.shape != expected:
                raise ValueError(f"{name} has shape {a.shape}, expected {expected}")
            object.__setattr__(self, name, a)
        masks = tuple(self.masks)
        if len(masks) != n or any((m.height, m.width) != (h, w) for m in masks):
            raise ValueError("masks do not match the map stack")
        object.__setattr__(self, "masks", masks)

    @property
    def n_views(self) -> int:
        return self.global_conf.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.global_conf.shape[1:]

    @property
    def degenerate_views(self) -> list[int]:
        return [k for k, m in enumerate(self.masks) if m.valid_count == 0]

    @classmethod
    def from_viewset(cls, views: ViewSet) -> "CacheSample":
        """Quantize a ViewSet whose views all carry masks."""
        a = views.stacked()
        if "masks" not in a:
            raise ValueError("every view needs a validity mask before packing")
        return cls(
            f16_encode(a["global_points"]),
            f16_encode(a["local_points"]),
            f16_encode(a["global_conf"]),
            f16_encode(a["local_conf"]),
            tuple(rle_encode(m) for m in a["masks"]),
        )

    def decoded(self) -> dict[str, np.ndarray]:
        out = {name: f16_decode(getattr(self, name)) for name in SECTION_NAMES[:4]}
        out["masks"] = np.stack([rle_decode(m).bits for m in self.masks])
        return out

    def to_viewset(self) -> ViewSet:
        d = self.decoded()
        return ViewSet.from_arrays(d["global_points"], d["local_points"],
                                   d["global_conf"], d["local_conf"], d["masks"])

    def identical_to(self, other: "CacheSample") -> bool:
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in SECTION_NAMES[:4]
        ) and self.masks == other.masks


def _pack_masks(masks) -> bytes:
    parts = []
    for m in masks:
        runs = np.asarray(m.run_lengths, dtype="<u4")
        parts.append(MASK_RECORD.pack(len(runs), int(m.first_value),
                                      int(m.valid_count == 0), 0))
        parts.append(runs.tobytes())
    return b"".join(parts)


def pack_archive(sample: CacheSample) -> bytes:
    n, (h, w) = sample.n_views, sample.resolution
    if n > 0xFFFF:
        raise ValueError(f"too many views for a 16-bit count: {n}")
    payloads = [np.asarray(getattr(sample, name), dtype="<u2").tobytes()
                for name in SECTION_NAMES[:4]]
    payloads.append(_pack_masks(sample.masks))

    table = []
    offset = HEADER_SIZE
    for p in payloads:
        table.append((offset, len(p)))
        offset = _align(offset + len(p))

    flags = FLAG_DEGENERATE if sample.degenerate_views else 0
    header = HEADER.pack(MAGIC, VERSION, n, h, w, flags, 0)
    header += b"".join(SECTION.pack(*t) for t in table)
    assert len(header) == HEADER_SIZE

    buf = bytearray(header)
    for (off, _), p in zip(table, payloads):
        buf.extend(b"\0" * (off - len(buf)))
        buf.extend(p)
    return bytes(buf)


def write_archive(sample: CacheSample, path: Union[str, os.PathLike]) -> int:
    """Write ``sample`` to ``path``; returns the number of bytes written."""
    data = pack_archive(sample)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


@dataclass(frozen=True)
class ArchiveHeader:
    version: int
    n_views: int
    height: int
    width: int
    flags: int
    sections: tuple[tuple[int, int], ...]

    def map_shape(self, index: int) -> tuple[int, ...]:
        base = (self.n_views, self.height, self.width)
        return base + (3,) if MAP_CHANNELS[index] == 3 else base

    @property
    def map_bytes(self) -> int:
        return sum(length for _, length in self.sections[:4])

    @property
    def end(self) -> int:
        off, length = self.sections[-1]
        return off + length


def parse_header(raw: bytes, file_size: Optional[int] = None) -> ArchiveHeader:
    """Validate the fixed header and section table against each other."""
    if len(raw) < HEADER_SIZE:
        raise CorruptDataError(
            f"truncated header: {len(raw)} bytes, need {HEADER_SIZE} (offset {len(raw)})"
        )
    magic, version, n, h, w, flags, _ = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}")
    sections = tuple(SECTION.unpack_from(raw, HEADER.size + i * SECTION.size)
                     for i in range(len(SECTION_NAMES)))
    hdr = ArchiveHeader(version, n, h, w, flags, sections)

    expected_off = HEADER_SIZE
    for i, (name, (off, length)) in enumerate(zip(SECTION_NAMES, sections)):
        if off % ALIGN:
            raise CorruptDataError(f"section {name} offset {off} is not 8-byte aligned")
        if off != expected_off:
            raise CorruptDataError(
                f"section {name} starts at {off}, expected {expected_off}"
            )
        if i < 4:
            want = int(np.prod(hdr.map_shape(i))) * 2
            if length != want:
                raise CorruptDataError(
                    f"section {name} is {length} bytes, expected {want} "
                    f"(table entry at offset {HEADER.size + i * SECTION.size})"
                )
        elif length < n * MASK_RECORD.size:
            raise CorruptDataError(f"mask section too short: {length} bytes")
        expected_off = _align(off + length)

    if file_size is not None and file_size < hdr.end:
        raise CorruptDataError(
            f"truncated archive: file ends at offset {file_size}, "
            f"payload runs to {hdr.end}"
        )
    return hdr


class ArchiveReader:
    """Positional, random-access reader over a D3RC file or an in-memory buffer.

    Reads go through ``os.pread`` so one reader can serve several threads.
    """

    def __init__(self, source: Union[str, os.PathLike, bytes]):
        if isinstance(source, (bytes, bytearray, memoryview)):
            self._buf = bytes(source)
            self._fd = None
            size = len(self._buf)
            self.path = None
        else:
            self.path = Path(source)
            self._buf = None
            self._fd = os.open(self.path, os.O_RDONLY)
            size = os.fstat(self._fd).st_size
        self.file_size = size
        try:
            self.header = parse_header(self._read(0, min(HEADER_SIZE, size)), size)
            self._mask_index = self._index_masks()
        except Exception:
            self.close()
            raise

    def _read(self, offset: int, n: int) -> bytes:
        if self._buf is not None:
            return self._buf[offset:offset + n]
        return os.pread(self._fd, n, offset)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _index_masks(self) -> list[tuple[int, int, bool, bool]]:
        off, length = self.header.sections[4]
        raw = self._read(off, length)
        pos, index = 0, []
        for k in range(self.header.n_views):
            if pos + MASK_RECORD.size > length:
                raise CorruptDataError(f"mask record {k} overruns section at offset {off + pos}")
            n_runs, first, degenerate, _ = MASK_RECORD.unpack_from(raw, pos)
            pos += MASK_RECORD.size
            if pos + 4 * n_runs > length:
                raise CorruptDataError(
                    f"mask record {k} claims {n_runs} runs, overruns section at offset {off + pos}"
                )
            index.append((off + pos, n_runs, bool(first), bool(degenerate)))
            pos += 4 * n_runs
        if pos != length:
            raise CorruptDataError(
                f"mask section has {length - pos} trailing bytes at offset {off + pos}"
            )
        return index

    @property
    def n_views(self) -> int:
        return self.header.n_views

    def degenerate_flags(self) -> list[bool]:
        return [d for *_, d in self._mask_index]

    def read_map(self, index: int, view: Optional[int] = None) -> np.ndarray:
        """Bit patterns of map section ``index`` (0..3), whole stack or one view."""
        hdr = self.header
        off, length = hdr.sections[index]
        shape = hdr.map_shape(index)
        if view is None:
            raw = self._read(off, length)
        else:
            if not 0 <= view < hdr.n_views:
                raise IndexError(view)
            per_view = length // max(hdr.n_views, 1)
            raw = self._read(off + view * per_view, per_view)
            shape = shape[1:]
        return np.frombuffer(raw, dtype="<u2").astype(np.uint16).reshape(shape)

    def read_mask(self, view: int) -> RleMask:
        off, n_runs, first, _ = self._mask_index[view]
        runs = np.frombuffer(self._read(off, 4 * n_runs), dtype="<u4").astype(np.uint32)
        return RleMask(self.header.height, self.header.width, first, runs)

    def read_view(self, view: int) -> dict:
        out = {name: self.read_map(i, view) for i, name in enumerate(SECTION_NAMES[:4])}
        out["mask"] = self.read_mask(view)
        return out

    def read_all(self) -> CacheSample:
        maps = [self.read_map(i) for i in range(4)]
        masks = tuple(self.read_mask(k) for k in range(self.n_views))
        return CacheSample(*maps, masks)


def read_archive(path) -> CacheSample:
    with ArchiveReader(path) as r:
        return r.read_all()


def unpack_archive(data: bytes) -> CacheSample:
    with ArchiveReader(data) as r:
        return r.read_all()


def archive_stats(path, source_image_bytes: Optional[int] = None) -> dict:
    """Storage accounting for one archive.

    ``raw_f32_bytes`` is what the four maps would occupy in float32, i.e.
    twice their stored size.
    """
    with ArchiveReader(path) as r:
        hdr = r.header
        masked = sum(
            hdr.height * hdr.width - r.read_mask(k).valid_count
            for k in range(hdr.n_views)
        )
        stored = r.file_size
        degenerate = sum(r.degenerate_flags())
    map_bytes = hdr.map_bytes
    stats = {
        "n_views": hdr.n_views,
        "height": hdr.height,
        "width": hdr.width,
        "map_bytes": map_bytes,
        "mask_bytes": hdr.sections[4][1],
        "stored_bytes": stored,
        "raw_f32_bytes": 2 * map_bytes,
        "stored_to_raw_ratio": stored / (2 * map_bytes) if map_bytes else float("nan"),
        "masked_pixels": masked,
        "degenerate_views": degenerate,
        "expansion_ratio_vs_source_images": None,
    }
    if source_image_bytes:
        stats["expansion_ratio_vs_source_images"] = stored / source_image_bytes
    return stats


def archive_size(n_views: int, height: int, width: int, runs_per_view) -> int:
    """Exact file size predicted from the section-size formula."""
    offset = HEADER_SIZE
    for ch in MAP_CHANNELS:
        offset = _align(offset + n_views * height * width * ch * 2)
    mask_len = sum(MASK_RECORD.size + 4 * r for r in runs_per_view)
    return offset + mask_len
