##############################################################################
# io_formats.py
# 16-bit PGM images, RAWV volumes and dataset manifests
##############################################################################
import logging
import os
import struct
from typing import ClassVar, List, NamedTuple, Tuple, Union

import numpy

from bimamba._exceptions import ParseError
from bimamba._internal_utils import _unpack_from, _unpack_memoryview_from

__all__ = [
    "read_pgm",
    "write_pgm",
    "encode_pgm",
    "decode_pgm",
    "read_volume",
    "write_volume",
    "encode_volume",
    "decode_volume",
    "ManifestEntry",
    "read_manifest",
    "write_manifest",
]

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

PGM_MAXVAL = 65535
_PGM_DTYPE = numpy.dtype(">u2")
_VOXEL_DTYPE = numpy.dtype("<f4")


def encode_pgm(image: numpy.ndarray) -> bytes:
    """
    Encodes a 2-D image with values in [0, 1] as a binary (P5) PGM with
    16-bit big-endian samples.
    """
    image = numpy.asarray(image, dtype=numpy.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError(f"Expected a nonempty 2-D image, got {image.shape}")
    if not numpy.all(numpy.isfinite(image)):
        raise ValueError("Image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError(
            f"Image values must lie in [0, 1], got [{image.min()},"
            f" {image.max()}]"
        )
    height, width = image.shape
    samples = numpy.rint(image * PGM_MAXVAL).astype(_PGM_DTYPE)
    header = f"P5\n{width:d} {height:d}\n{PGM_MAXVAL:d}\n".encode("ascii")
    return header + samples.tobytes()


def _pgm_header(data: memoryview) -> Tuple[List[int], int]:
    # Magic, then width, height and maxval as whitespace-separated decimal
    # tokens (comments allowed), then exactly one whitespace byte.
    if bytes(data[:2]) != b"P5":
        raise ParseError(
            f"Not a binary PGM: expected magic b'P5', found"
            f" {bytes(data[:2])!r}",
            offset=0,
        )
    offset = 2
    fields = []
    while len(fields) < 3:
        if offset >= len(data):
            raise ParseError(
                "Truncated PGM header: expected"
                f" {3 - len(fields):d} more fields",
                offset=offset,
            )
        byte = data[offset]
        if chr(byte).isspace():
            offset += 1
        elif byte == ord("#"):
            while offset < len(data) and data[offset] not in b"\r\n":
                offset += 1
        elif chr(byte).isdigit():
            start = offset
            while offset < len(data) and chr(data[offset]).isdigit():
                offset += 1
            fields.append(int(bytes(data[start:offset])))
        else:
            raise ParseError(
                f"Malformed PGM header: unexpected byte {bytes([byte])!r}",
                offset=offset,
            )
    if offset >= len(data) or not chr(data[offset]).isspace():
        raise ParseError(
            "Malformed PGM header: missing separator before pixel data",
            offset=offset,
        )
    return fields, offset + 1


def decode_pgm(data: Union[bytes, bytearray, memoryview]) -> numpy.ndarray:
    """
    Decodes a binary PGM into a float32 image scaled to [0, 1].

    8-bit files are accepted as well as 16-bit ones.
    """
    data = memoryview(data)
    (width, height, maxval), offset = _pgm_header(data)
    if width < 1 or height < 1 or not 0 < maxval <= PGM_MAXVAL:
        raise ParseError(
            f"Invalid PGM dimensions {width}x{height} or maxval {maxval}",
            offset=offset,
        )
    dtype = _PGM_DTYPE if maxval > 255 else numpy.dtype("u1")
    length = width * height * dtype.itemsize
    raw = _unpack_memoryview_from(length, data, offset)
    samples = numpy.frombuffer(raw, dtype=dtype).reshape(height, width)
    return (samples.astype(numpy.float64) / maxval).astype(numpy.float32)


def write_pgm(path: PathLike, image: numpy.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(image))


def read_pgm(path: PathLike) -> numpy.ndarray:
    with open(path, "rb") as f:
        return decode_pgm(f.read())


class _VolumeHeader:
    magic: ClassVar[bytes] = b"RAWV"
    extents_segment: ClassVar[struct.Struct] = struct.Struct(
        "<"  # Little-endian
        "III"  # Dz, Dy, Dx
    )


def encode_volume(volume: numpy.ndarray) -> bytes:
    volume = numpy.asarray(volume)
    if volume.ndim != 3 or min(volume.shape) < 1:
        raise ValueError(f"Expected a nonempty 3-D volume, got {volume.shape}")
    return b"".join(
        (
            _VolumeHeader.magic,
            _VolumeHeader.extents_segment.pack(*volume.shape),
            numpy.ascontiguousarray(volume, dtype=_VOXEL_DTYPE).tobytes(),
        )
    )


def decode_volume(data: Union[bytes, bytearray, memoryview]) -> numpy.ndarray:
    """Decodes a RAWV volume into a float32 array of shape (Dz, Dy, Dx)."""
    data = memoryview(data)
    magic = bytes(_unpack_memoryview_from(4, data, 0))
    if magic != _VolumeHeader.magic:
        raise ParseError(
            f"Not a RAWV volume: expected magic b'RAWV', found {magic!r}",
            offset=0,
        )
    extents, offset = _unpack_from(_VolumeHeader.extents_segment, data, 4)
    if min(extents) < 1:
        raise ParseError(
            f"Invalid volume extents {extents}: all must be >= 1", offset=4
        )
    length = extents[0] * extents[1] * extents[2] * _VOXEL_DTYPE.itemsize
    raw = _unpack_memoryview_from(length, data, offset)
    if offset + length != len(data):
        raise ParseError(
            f"{len(data) - offset - length:d} trailing bytes after the voxels",
            offset=offset + length,
        )
    voxels = numpy.frombuffer(raw, dtype=_VOXEL_DTYPE).reshape(extents)
    return voxels.astype(numpy.float32)


def write_volume(path: PathLike, volume: numpy.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_volume(volume))


def read_volume(path: PathLike) -> numpy.ndarray:
    with open(path, "rb") as f:
        return decode_volume(f.read())


class ManifestEntry(NamedTuple):
    subject_id: str
    split: str
    label: int


_SPLITS = ("train", "val", "test")


def write_manifest(path: PathLike, entries: List[ManifestEntry]) -> None:
    """Writes ``subject_id<TAB>split<TAB>label`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry in entries:
            f.write(f"{entry.subject_id}\t{entry.split}\t{entry.label:d}\n")


def read_manifest(path: PathLike) -> List[ManifestEntry]:
    with open(path, "rb") as f:
        data = f.read()
    entries = []
    offset = 0
    for line in data.splitlines(keepends=True):
        text = line.decode("utf-8", errors="replace").rstrip("\r\n")
        if text.strip():
            fields = text.split("\t")
            if (
                len(fields) != 3
                or fields[1] not in _SPLITS
                or fields[2] not in ("0", "1")
            ):
                raise ParseError(
                    f"Malformed manifest line {text!r}: expected"
                    " subject_id<TAB>{train|val|test}<TAB>{0|1}",
                    offset=offset,
                )
            entries.append(ManifestEntry(fields[0], fields[1], int(fields[2])))
        offset += len(line)
    return entries
