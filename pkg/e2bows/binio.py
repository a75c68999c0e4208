"""Little-endian record helpers for the binary files and a strict UTF-8 line reader."""
import struct
from typing import BinaryIO, List, Tuple

import numpy as np

from e2bows.errors import FormatError

FORMAT_VERSION = 1


class BinaryReader:
    """Cursor over an in-memory file image that reports byte offsets on failure."""

    def __init__(self, buffer: bytes, name: str = "file"):
        self.buffer = buffer
        self.name = name
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.buffer) - self.offset

    def _take(self, size: int) -> memoryview:
        if size > self.remaining:
            raise FormatError(
                f"truncated {self.name}: wanted {size} bytes, {self.remaining} left",
                offset=self.offset,
            )
        view = memoryview(self.buffer)[self.offset:self.offset + size]
        self.offset += size
        return view

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack("<" + fmt, self._take(struct.calcsize("<" + fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def f64(self) -> float:
        return self.unpack("d")[0]

    def raw(self, size: int) -> bytes:
        return bytes(self._take(size))

    def array(self, dtype, count: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self._take(dtype.itemsize * count), dtype=dtype).copy()

    def expect_magic(self, magic: bytes) -> None:
        start = self.offset
        found = self.raw(len(magic))
        if found != magic:
            raise FormatError(f"bad magic in {self.name}: expected {magic!r}, found {found!r}", offset=start)
        start = self.offset
        version = self.u32()
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported {self.name} version {version}", offset=start)

    def expect_end(self) -> None:
        if self.remaining:
            raise FormatError(f"{self.remaining} trailing bytes in {self.name}", offset=self.offset)


def read_file(path) -> bytes:
    with open(path, mode="rb") as fh:
        return fh.read()


def read_text_lines(path, name: str = "text file") -> List[str]:
    """Lines of a UTF-8 text file without their line endings.

    A line that is not valid UTF-8 raises ``FormatError`` carrying its
    1-based line number.
    """
    lines = []
    for number, raw in enumerate(read_file(path).splitlines(), start=1):
        try:
            lines.append(raw.decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"{name} is not valid UTF-8: {e.reason}", offset=number)
    return lines


def write_header(fh: BinaryIO, magic: bytes) -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))


def pack(fmt: str, *values) -> bytes:
    return struct.pack("<" + fmt, *values)
