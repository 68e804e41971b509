"""Reader/writer for the ".msraw" raw mosaic sequence format.

Little-endian layout:

* 32-byte header: magic ``MSR1``, width u32, height u32, bit_depth u32,
  frame_count u32, fps f32, 8 reserved bytes.
* ``frame_count`` frame records, each a f64 timestamp (seconds) followed by
  width*height u16 pixel values, row-major.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .mosaic import RawMosaicFrame

MAGIC = b"MSR1"
_HEADER = struct.Struct("<4sIIIIf8x")
HEADER_SIZE = _HEADER.size  # 32


@dataclass(frozen=True)
class MsrawHeader:
    width: int
    height: int
    bit_depth: int
    frame_count: int
    fps: float

    @property
    def frame_record_size(self) -> int:
        return 8 + 2 * self.width * self.height

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.width, self.height, self.bit_depth, self.frame_count, self.fps
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "MsrawHeader":
        magic, width, height, bit_depth, frame_count, fps = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise DataError(f"bad magic {magic!r}, expected {MAGIC!r}")
        return cls(width, height, bit_depth, frame_count, fps)


class MsrawWriter:
    """Streaming writer; frame_count is patched into the header on close."""

    def __init__(self, path, width: int, height: int, bit_depth: int = 10, fps: float = 25.0):
        self.path = os.fspath(path)
        self.header = MsrawHeader(width, height, bit_depth, 0, fps)
        self._fh = open(self.path, "wb")
        self._fh.write(self.header.pack())
        self._count = 0

    def append(self, frame: RawMosaicFrame) -> None:
        if frame.pixels.shape != (self.header.height, self.header.width):
            raise DataError(
                f"frame shape {frame.pixels.shape} does not match header "
                f"{self.header.height}x{self.header.width}"
            )
        self._fh.write(struct.pack("<d", frame.timestamp))
        self._fh.write(np.ascontiguousarray(frame.pixels, dtype="<u2").tobytes())
        self._count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self.header = MsrawHeader(
            self.header.width,
            self.header.height,
            self.header.bit_depth,
            self._count,
            self.header.fps,
        )
        self._fh.seek(0)
        self._fh.write(self.header.pack())
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MsrawReader:
    """Random-access and streaming reader for a .msraw sequence."""

    def __init__(self, path):
        self.path = os.fspath(path)
        try:
            self._fh = open(self.path, "rb")
        except OSError as exc:
            raise DataError(f"cannot open {self.path}: {exc}") from exc
        raw = self._fh.read(HEADER_SIZE)
        if len(raw) != HEADER_SIZE:
            raise DataError(f"{self.path}: truncated header")
        self.header = MsrawHeader.unpack(raw)
        expected = HEADER_SIZE + self.header.frame_count * self.header.frame_record_size
        actual = os.fstat(self._fh.fileno()).st_size
        if actual < expected:
            raise DataError(
                f"{self.path}: file holds {actual} bytes, header promises {expected}"
            )

    def __len__(self) -> int:
        return self.header.frame_count

    def __getitem__(self, index: int) -> RawMosaicFrame:
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(f"frame {index} out of range 0..{len(self) - 1}")
        self._fh.seek(HEADER_SIZE + index * self.header.frame_record_size)
        return self._read_frame()

    def _read_frame(self) -> RawMosaicFrame:
        h = self.header
        record = self._fh.read(h.frame_record_size)
        if len(record) != h.frame_record_size:
            raise DataError(f"{self.path}: truncated frame record")
        (timestamp,) = struct.unpack_from("<d", record)
        pixels = np.frombuffer(record, dtype="<u2", offset=8).reshape(h.height, h.width)
        return RawMosaicFrame(
            pixels.copy(), bit_depth=h.bit_depth, timestamp=timestamp
        )

    def __iter__(self):
        self._fh.seek(HEADER_SIZE)
        for _ in range(len(self)):
            yield self._read_frame()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_sequence(path, frames, bit_depth: int = 10, fps: float = 25.0) -> MsrawHeader:
    """Write an iterable of frames to ``path``; returns the final header."""
    frames = iter(frames)
    try:
        first = next(frames)
    except StopIteration:
        raise DataError("cannot write an empty sequence") from None
    with MsrawWriter(path, first.width, first.height, bit_depth=bit_depth, fps=fps) as out:
        out.append(first)
        for frame in frames:
            out.append(frame)
        header = out.header
    return MsrawHeader(
        header.width, header.height, header.bit_depth, out._count, header.fps
    )
