##############################################################################
# serialization.py
# Self-describing model checkpoints ("BIMB1" files)
##############################################################################
"""
Checkpoint layout (all integers little-endian)::

    5s      magic, b"BIMB1"
    I       config block length
    ...     UTF-8 "key=value" lines, one per ModelConfig field
    I       tensor count
    per tensor:
      H     name length
      ...   UTF-8 name
      B     rank
      rI    extents
      ...   float32 values, row-major

Parameters are always stored as float32 and cast to the config's dtype on
load.
"""
import dataclasses
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from typing import BinaryIO, ClassVar, Dict, Optional, Tuple, Union

import numpy
import torch

from bimamba._exceptions import CheckpointMismatchError, ParseError
from bimamba._internal_utils import (
    _unpack_from,
    _unpack_memoryview_from,
    _variable_read,
)
from bimamba.model import BiMambaModel, ModelConfig

__all__ = [
    "MAGIC",
    "CheckpointWriter",
    "CheckpointReader",
    "save_checkpoint",
    "load_checkpoint",
    "load_model",
]

logger = logging.getLogger(__name__)

MAGIC = b"BIMB1"

_DATA_DTYPE = numpy.dtype("<f4")


@dataclasses.dataclass(frozen=True)
class _TensorHeader:
    name: str
    shape: Tuple[int, ...]

    start_segment: ClassVar[struct.Struct] = struct.Struct(
        "<"  # Little-endian
        "H"  # Name length
    )
    rank_segment: ClassVar[struct.Struct] = struct.Struct(
        "<"
        "B"  # Rank
    )
    shape_segment_template: ClassVar[str] = (
        "<"
        "{rank:d}I"  # Extents
    )

    @property
    def numel(self) -> int:
        n = 1
        for extent in self.shape:
            n *= extent
        return n

    def to_bytes(self) -> bytes:
        encoded = self.name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"Tensor name too long: {self.name[:40]!r}...")
        if len(self.shape) > 0xFF:
            raise ValueError(f"Tensor {self.name} has too many dimensions")
        return b"".join(
            (
                self.start_segment.pack(len(encoded)),
                encoded,
                self.rank_segment.pack(len(self.shape)),
                struct.pack(
                    self.shape_segment_template.format(rank=len(self.shape)),
                    *self.shape,
                ),
            )
        )

    @classmethod
    def from_buffer(
        cls, data: memoryview, offset: int
    ) -> Tuple["_TensorHeader", int]:
        name, offset = _variable_read(data, offset, length_fmt="H")
        try:
            decoded = bytes(name).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(
                f"Tensor name at offset {offset - len(name):d} is not UTF-8",
                offset=offset - len(name),
            ) from e
        (rank,), offset = _unpack_from(cls.rank_segment, data, offset)
        shape_segment = struct.Struct(
            cls.shape_segment_template.format(rank=rank)
        )
        shape, offset = _unpack_from(shape_segment, data, offset)
        return cls(decoded, tuple(shape)), offset


class CheckpointWriter:
    """
    Streams a checkpoint to a binary file object.

    Example:
        Writing a model by hand::

            with open("model.bimb", "wb") as f:
                writer = CheckpointWriter(f, model.config)
                writer.write_tensors(model.named_parameters())
    """

    count_segment: ClassVar[struct.Struct] = struct.Struct(
        "<"
        "I"  # Config block length / tensor count
    )

    def __init__(self, file_obj: BinaryIO, config: ModelConfig):
        self._file = file_obj
        self.config = config
        self.bytes_written = 0
        block = "".join(f"{k}={v}\n" for k, v in config.to_items())
        self._write(MAGIC)
        self._write(self.count_segment.pack(len(block.encode("utf-8"))))
        self._write(block.encode("utf-8"))

    def _write(self, data: bytes) -> None:
        self._file.write(data)
        self.bytes_written += len(data)

    def write_tensors(self, tensors) -> None:
        tensors = list(tensors)
        self._write(self.count_segment.pack(len(tensors)))
        for name, tensor in tensors:
            values = tensor.detach().to("cpu", torch.float32).contiguous()
            header = _TensorHeader(name, tuple(values.shape))
            self._write(header.to_bytes())
            data = values.numpy().astype(_DATA_DTYPE, copy=False)
            self._write(data.tobytes())
        logger.debug(
            f"Wrote {len(tensors)} tensors, {self.bytes_written:,} bytes"
        )


class CheckpointReader:
    """
    Parses a checkpoint held in memory.

    Every read is bounds-checked; truncated or malformed input raises
    `ParseError` with the byte offset where parsing failed.
    """

    def __init__(self, data: Union[bytes, bytearray, memoryview]):
        self._data = memoryview(data)
        self.config, offset = self._read_config()
        self.tensors: Dict[str, torch.Tensor] = self._read_tensors(offset)

    def _read_config(self) -> Tuple[ModelConfig, int]:
        magic = bytes(_unpack_memoryview_from(len(MAGIC), self._data, 0))
        if magic != MAGIC:
            raise ParseError(
                f"Not a checkpoint: expected magic {MAGIC!r}, found {magic!r}",
                offset=0,
            )
        block, offset = _variable_read(
            self._data, len(MAGIC), length_fmt="I"
        )
        block_start = offset - len(block)
        try:
            text = bytes(block).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(
                "Config block is not UTF-8", offset=block_start
            ) from e
        items = {}
        for line_number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError(
                    f"Malformed config line {line_number}: {line!r}",
                    offset=block_start,
                )
            items[key.strip()] = value.strip()
        try:
            config = ModelConfig.from_items(items)
        except ValueError as e:
            raise ParseError(
                f"Invalid checkpoint config: {e}", offset=block_start
            ) from e
        return config, offset

    def _read_tensors(self, offset: int) -> Dict[str, torch.Tensor]:
        (count,), offset = _unpack_from(
            CheckpointWriter.count_segment, self._data, offset
        )
        dtype = self.config.torch_dtype
        tensors = OrderedDict()
        for _ in range(count):
            header, offset = _TensorHeader.from_buffer(self._data, offset)
            length = header.numel * _DATA_DTYPE.itemsize
            raw = _unpack_memoryview_from(length, self._data, offset)
            values = numpy.frombuffer(raw, dtype=_DATA_DTYPE).copy()
            tensors[header.name] = (
                torch.from_numpy(values).reshape(header.shape).to(dtype)
            )
            offset += length
        if offset != len(self._data):
            raise ParseError(
                f"{len(self._data) - offset:d} trailing bytes after the"
                " last tensor",
                offset=offset,
            )
        return tensors


def save_checkpoint(
    model: BiMambaModel, path: Union[str, os.PathLike]
) -> int:
    """
    Writes `model` atomically: the checkpoint is assembled in a temporary
    file in the same directory and then renamed over `path`.

    Returns:
        The number of bytes written.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".partial")
    try:
        with os.fdopen(fd, "wb") as f:
            writer = CheckpointWriter(f, model.config)
            writer.write_tensors(model.named_parameters())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.info(f"Saved checkpoint {path} ({writer.bytes_written:,} bytes)")
    return writer.bytes_written


def load_checkpoint(
    source: Union[str, os.PathLike, bytes, bytearray],
    expected_config: Optional[ModelConfig] = None,
) -> CheckpointReader:
    """
    Reads a checkpoint from a path or from raw bytes.

    Raises:
        ParseError: If the data is truncated or malformed.
        CheckpointMismatchError: If `expected_config` is given and differs
            from the stored config.
    """
    if isinstance(source, (bytes, bytearray)):
        data = source
    else:
        with open(source, "rb") as f:
            data = f.read()
    reader = CheckpointReader(data)
    if expected_config is not None and reader.config != expected_config:
        differing = [
            f"{k} (stored {getattr(reader.config, k)!r},"
            f" expected {getattr(expected_config, k)!r})"
            for k in ModelConfig.field_names()
            if getattr(reader.config, k) != getattr(expected_config, k)
        ]
        raise CheckpointMismatchError(
            "Checkpoint config does not match: " + ", ".join(differing)
        )
    return reader


def load_model(
    source: Union[str, os.PathLike, bytes, bytearray],
    expected_config: Optional[ModelConfig] = None,
) -> BiMambaModel:
    """
    Rebuilds a `BiMambaModel` from a checkpoint, checking that the stored
    tensors match the model's parameters exactly in names and shapes.
    """
    reader = load_checkpoint(source, expected_config)
    model = BiMambaModel(reader.config)
    expected = {n: tuple(p.shape) for n, p in model.named_parameters()}
    stored = {n: tuple(t.shape) for n, t in reader.tensors.items()}
    if expected != stored:
        missing = sorted(expected.keys() - stored.keys())
        unexpected = sorted(stored.keys() - expected.keys())
        reshaped = sorted(
            n
            for n in expected.keys() & stored.keys()
            if expected[n] != stored[n]
        )
        raise CheckpointMismatchError(
            "Checkpoint tensors do not match the model:"
            f" missing {missing}, unexpected {unexpected},"
            f" wrong shape {reshaped}"
        )
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.copy_(reader.tensors[name])
    return model
