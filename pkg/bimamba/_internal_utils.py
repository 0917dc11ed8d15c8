import dataclasses
import struct
import typing
from typing import Iterator, Tuple, Union

from bimamba._exceptions import ParseError

_Buffer = Union[bytes, bytearray, memoryview]  # type: typing.TypeAlias


@dataclasses.dataclass(init=False)
class Chunked:
    __slots__ = ("count", "total_size", "chunk_size", "remainder")
    count: int
    total_size: int
    chunk_size: int
    remainder: int

    def __init__(self, total_size: int, chunk_size: int):
        if chunk_size <= 0:
            chunk_size = max(total_size, 1)
        self.total_size = total_size
        self.chunk_size = chunk_size
        self.remainder = total_size % chunk_size
        self.count = total_size // chunk_size + (self.remainder != 0)

    def slices(self) -> Iterator[slice]:
        for i in range(self.count):
            start = i * self.chunk_size
            yield slice(start, min(start + self.chunk_size, self.total_size))


def _unpack_from(
    segment: struct.Struct, data: _Buffer, offset: int
) -> Tuple[tuple, int]:
    """
    Unpacks a fixed-size segment, converting short reads into `ParseError`.

    Returns:
        A tuple of the unpacked values, and the offset in the buffer
        following the end of the segment.
    """
    end = offset + segment.size
    if end > len(data):
        raise ParseError(
            f"Truncated data: expected {segment.size:d} bytes at offset"
            f" {offset:d}, missing {end - len(data):d} bytes",
            offset=offset,
        )
    return segment.unpack_from(data, offset), end


def _variable_read(
    data: _Buffer, offset: int = 0, length_fmt: str = "B"
) -> Tuple[memoryview, int]:
    """
    Reads a length-prefixed byte field from a buffer.

    Returns:
        A view of the field's bytes, and the offset in the buffer
        following the end of the field.
    """
    assert length_fmt in ("B", "H", "I", "Q")
    (length,), offset = _unpack_from(
        struct.Struct("<" + length_fmt), data, offset
    )
    return _unpack_memoryview_from(length, data, offset), offset + length


def _unpack_memoryview_from(
    length: int, buffer: _Buffer, offset: int
) -> memoryview:
    # Grabbing a memoryview with bounds checking.
    # Bounds checking is normally provided by the struct module,
    # but it can't return memoryviews.
    with memoryview(buffer) as mv:
        end = offset + length
        view = mv[offset:end]
        if len(view) < length:
            missing = length - len(view)
            view.release()
            mv.release()
            raise ParseError(
                f"Truncated data: expected {length:d} bytes at offset"
                f" {offset:d}, missing {missing:d} bytes"
                f" (actual buffer size is {len(buffer):d})",
                offset=offset,
            )
        return view
