"""Storage codecs: binary16 quantization, RLE masks and the D3RC archive."""

from .archive import (
    ArchiveHeader,
    ArchiveReader,
    CacheSample,
    FormatError,
    archive_size,
    archive_stats,
    pack_archive,
    read_archive,
    unpack_archive,
    write_archive,
)
from .half import HALF_MAX, InvalidDataError, f16_decode, f16_encode, is_finite_half
from .rle import CorruptDataError, RleMask, rle_decode, rle_encode

__all__ = [
    "ArchiveHeader", "ArchiveReader", "CacheSample", "CorruptDataError",
    "FormatError", "HALF_MAX", "InvalidDataError", "RleMask", "archive_size",
    "archive_stats", "f16_decode", "f16_encode", "is_finite_half",
    "pack_archive", "read_archive", "rle_decode", "rle_encode",
    "unpack_archive", "write_archive",
]
