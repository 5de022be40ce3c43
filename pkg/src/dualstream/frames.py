"""Raw image payloads and their netpbm (PGM/PPM) file forms."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FrameFormatError


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """Metric depth, uint16 millimetres, shape (height, width). 0 means no reading."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise ValueError(f"depth samples must be 2-D, got shape {s.shape}")
        if s.dtype != np.uint16:
            s = s.astype(np.uint16)
        object.__setattr__(self, "samples", s)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @classmethod
    def from_meters(cls, depth_m: np.ndarray) -> DepthFrame:
        mm = np.rint(np.nan_to_num(np.asarray(depth_m, dtype=float), nan=0.0) * 1000.0)
        return cls(np.clip(mm, 0, 65535).astype(np.uint16))

    def meters(self) -> np.ndarray:
        return self.samples.astype(np.float64) / 1000.0

    def __eq__(self, other):
        if not isinstance(other, DepthFrame):
            return NotImplemented
        return self.samples.shape == other.samples.shape and np.array_equal(self.samples, other.samples)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ColorFrame:
    """8-bit RGB, shape (height, width, 3), row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"color pixels must have shape (h, w, 3), got {p.shape}")
        if p.dtype != np.uint8:
            p = p.astype(np.uint8)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, rgb=(0, 0, 0)) -> ColorFrame:
        p = np.empty((height, width, 3), np.uint8)
        p[...] = rgb
        return cls(p)

    def __eq__(self, other):
        if not isinstance(other, ColorFrame):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


# --- netpbm ---------------------------------------------------------------

def _read_header(data: bytes, n_fields: int) -> tuple[list[bytes], int]:
    fields: list[bytes] = []
    i = 0
    n = len(data)
    while len(fields) < n_fields:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FrameFormatError("truncated netpbm header")
        fields.append(data[start:i])
    # exactly one whitespace byte separates header from raster
    if i >= n or not data[i:i + 1].isspace():
        raise FrameFormatError("missing whitespace after netpbm header")
    return fields, i + 1


def _parse(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if data[:2] != magic:
        raise FrameFormatError(f"expected {magic.decode()} magic, got {data[:2]!r}")
    fields, offset = _read_header(data, 4)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FrameFormatError(f"non-integer netpbm header field: {exc}") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FrameFormatError(f"bad netpbm dimensions {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = width * height * channels
    if len(data) - offset < count * dtype.itemsize:
        raise FrameFormatError(
            f"raster truncated: need {count * dtype.itemsize} bytes, have {len(data) - offset}")
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return raster.reshape(shape), maxval


def parse_pgm(data: bytes) -> DepthFrame:
    """Parse a binary (P5) PGM. 16-bit samples are big-endian per the netpbm spec."""
    raster, _ = _parse(data, b"P5", 1)
    return DepthFrame(raster.astype(np.uint16))


def parse_ppm(data: bytes) -> ColorFrame:
    raster, maxval = _parse(data, b"P6", 3)
    if maxval != 255:
        raise FrameFormatError(f"only 8-bit PPM supported (maxval 255), got {maxval}")
    return ColorFrame(raster.copy())


def format_pgm(frame: DepthFrame) -> bytes:
    header = f"P5\n{frame.width} {frame.height}\n65535\n".encode("ascii")
    return header + frame.samples.astype(">u2").tobytes()


def format_ppm(frame: ColorFrame) -> bytes:
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(frame.pixels).tobytes()


def read_pgm(path: str | os.PathLike) -> DepthFrame:
    with open(path, "rb") as f:
        return parse_pgm(f.read())


def read_ppm(path: str | os.PathLike) -> ColorFrame:
    with open(path, "rb") as f:
        return parse_ppm(f.read())


def write_pgm(path: str | os.PathLike, frame: DepthFrame) -> None:
    with open(path, "wb") as f:
        f.write(format_pgm(frame))


def write_ppm(path: str | os.PathLike, frame: ColorFrame) -> None:
    with open(path, "wb") as f:
        f.write(format_ppm(frame))
