"""2x2 composite frames: four synchronized sub-streams in one RGB plane.

Layout (cell = max width/height over the present quadrants)::

    +-------------+-------------+
    | self colour | self depth  |   TL | TR
    +-------------+-------------+
    | env colour  | env depth   |   BL | BR
    +-------------+-------------+

Each sub-frame sits at the top-left corner of its cell; the rest is black.
All four quadrants share the composite's ``seq`` and ``timestamp_us``, which
is what keeps the streams synchronized end to end.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from ._crc import crc32
from .depthcodec import ColorizationParams
from .errors import BadMagicError, ChecksumError, LayoutError, TruncatedError, WireFormatError
from .frames import ColorFrame

MAGIC = b"DSCF"
VERSION = 1
MAX_QUADRANT = (1920, 1080)
NO_DIGEST = bytes(8)

_HEAD = struct.Struct("<4sHQQ")
_QUAD = struct.Struct("<BHH8s")
_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEAD.size + 4 * _QUAD.size + _LEN.size


class Quadrant(enum.IntEnum):
    SELF_COLOR = 0  # TL
    SELF_DEPTH = 1  # TR
    ENV_COLOR = 2   # BL
    ENV_DEPTH = 3   # BR

    @property
    def origin(self) -> tuple[int, int]:
        """(column, row) of the cell in the 2x2 grid."""
        return (self.value % 2, self.value // 2)

    @property
    def is_depth(self) -> bool:
        return self in (Quadrant.SELF_DEPTH, Quadrant.ENV_DEPTH)


@dataclass(frozen=True)
class QuadrantInfo:
    present: bool
    width: int = 0
    height: int = 0
    params_digest: bytes = NO_DIGEST


ABSENT = QuadrantInfo(False)


@dataclass(frozen=True, eq=False)
class CompositeFrame:
    seq: int
    timestamp_us: int
    quadrants: tuple[QuadrantInfo, QuadrantInfo, QuadrantInfo, QuadrantInfo]
    payload: np.ndarray  # (2*cell_h, 2*cell_w, 3) uint8

    @property
    def cell(self) -> tuple[int, int]:
        return cell_size(self.quadrants)

    def __eq__(self, other):
        if not isinstance(other, CompositeFrame):
            return NotImplemented
        return (self.seq == other.seq and self.timestamp_us == other.timestamp_us
                and self.quadrants == other.quadrants
                and self.payload.shape == other.payload.shape
                and np.array_equal(self.payload, other.payload))

    __hash__ = None


@dataclass(frozen=True)
class Unpacked:
    self_color: ColorFrame | None
    self_depth: ColorFrame | None
    env_color: ColorFrame | None
    env_depth: ColorFrame | None
    seq: int
    timestamp_us: int
    quadrants: tuple[QuadrantInfo, ...]

    def frame(self, q: Quadrant) -> ColorFrame | None:
        return (self.self_color, self.self_depth, self.env_color, self.env_depth)[q]

    def timestamps(self) -> dict[Quadrant, int]:
        """Capture timestamp of every present quadrant (all equal by construction)."""
        return {q: self.timestamp_us for q in Quadrant if self.quadrants[q].present}


def cell_size(quadrants) -> tuple[int, int]:
    present = [q for q in quadrants if q.present]
    if not present:
        return (0, 0)
    return (max(q.width for q in present), max(q.height for q in present))


def _digest(params) -> bytes:
    if params is None:
        return NO_DIGEST
    if isinstance(params, ColorizationParams):
        return params.digest()
    d = bytes(params)
    if len(d) != 8:
        raise ValueError("params digest must be 8 bytes")
    return d


def pack(self_color: ColorFrame | None, self_depth: ColorFrame | None,
         env_color: ColorFrame | None, env_depth: ColorFrame | None,
         timestamp_us: int, seq: int, *,
         self_params: ColorizationParams | bytes | None = None,
         env_params: ColorizationParams | bytes | None = None,
         max_quadrant: tuple[int, int] = MAX_QUADRANT) -> CompositeFrame:
    frames = (self_color, self_depth, env_color, env_depth)
    if all(f is None for f in frames):
        raise LayoutError("cannot pack a composite with every quadrant absent")
    if not (0 <= seq < 2**64 and 0 <= timestamp_us < 2**64):
        raise ValueError("seq and timestamp_us must fit in u64")
    digests = (NO_DIGEST, _digest(self_params), NO_DIGEST, _digest(env_params))
    infos = []
    for q, f in zip(Quadrant, frames):
        if f is None:
            infos.append(ABSENT)
            continue
        if f.width > max_quadrant[0] or f.height > max_quadrant[1]:
            raise LayoutError(
                f"{q.name} is {f.width}x{f.height}, larger than the {max_quadrant[0]}x{max_quadrant[1]} maximum")
        infos.append(QuadrantInfo(True, f.width, f.height, digests[q] if q.is_depth else NO_DIGEST))
    cw, ch = cell_size(infos)
    payload = np.zeros((2 * ch, 2 * cw, 3), np.uint8)
    for q, f in zip(Quadrant, frames):
        if f is not None:
            col, row = q.origin
            payload[row * ch:row * ch + f.height, col * cw:col * cw + f.width] = f.pixels
    payload.setflags(write=False)
    return CompositeFrame(seq, timestamp_us, tuple(infos), payload)


def _validate_layout(quadrants, payload: np.ndarray) -> None:
    if not any(q.present for q in quadrants):
        raise LayoutError("composite has no present quadrant")
    for kind, q in zip(Quadrant, quadrants):
        if not q.present and (q.width or q.height or q.params_digest != NO_DIGEST):
            raise LayoutError(f"absent {kind.name} carries dimensions or a params digest")
        if not kind.is_depth and q.params_digest != NO_DIGEST:
            raise LayoutError(f"{kind.name} is a colour quadrant but carries a params digest")
        if q.present and (q.width == 0 or q.height == 0):
            raise LayoutError("present quadrant has zero size")
    cw, ch = cell_size(quadrants)
    if payload.shape != (2 * ch, 2 * cw, 3):
        raise LayoutError(f"payload shape {payload.shape} does not match cell {cw}x{ch}")


def unpack(f: CompositeFrame) -> Unpacked:
    _validate_layout(f.quadrants, f.payload)
    cw, ch = f.cell
    out = []
    for q, info in zip(Quadrant, f.quadrants):
        if not info.present:
            out.append(None)
            continue
        col, row = q.origin
        out.append(ColorFrame(f.payload[row * ch:row * ch + info.height, col * cw:col * cw + info.width]))
    return Unpacked(*out, seq=f.seq, timestamp_us=f.timestamp_us, quadrants=f.quadrants)


def serialize(f: CompositeFrame) -> bytes:
    """Wire form; see docs/wire-format.md."""
    _validate_layout(f.quadrants, f.payload)
    head = [_HEAD.pack(MAGIC, VERSION, f.seq, f.timestamp_us)]
    for q in f.quadrants:
        head.append(_QUAD.pack(int(q.present), q.width, q.height, q.params_digest))
    payload = memoryview(np.ascontiguousarray(f.payload)).cast("B")
    head.append(_LEN.pack(len(payload)))
    header = b"".join(head)
    crc = crc32(payload, crc32(header))
    return b"".join((header, payload, _CRC.pack(crc)))


def parse(data: bytes) -> CompositeFrame:
    data = bytes(data) if not isinstance(data, bytes) else data
    if len(data) < HEADER_SIZE + _CRC.size:
        raise TruncatedError(f"composite needs at least {HEADER_SIZE + _CRC.size} bytes, got {len(data)}")
    magic, version, seq, ts = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireFormatError(f"unsupported composite version {version}")
    quads = []
    off = _HEAD.size
    for _ in range(4):
        present, w, h, digest = _QUAD.unpack_from(data, off)
        if present > 1:
            raise LayoutError(f"present flag must be 0 or 1, got {present}")
        quads.append(QuadrantInfo(bool(present), w, h, digest))
        off += _QUAD.size
    (plen,) = _LEN.unpack_from(data, off)
    off += _LEN.size
    if len(data) < off + plen + _CRC.size:
        raise TruncatedError(f"payload truncated: header says {plen} bytes")
    if len(data) > off + plen + _CRC.size:
        raise LayoutError("trailing bytes after checksum")
    (crc,) = _CRC.unpack_from(data, off + plen)
    if crc32(memoryview(data)[:off + plen]) != crc:
        raise ChecksumError("CRC32 mismatch")
    cw, ch = cell_size(quads)
    if plen != 12 * cw * ch or plen == 0:
        raise LayoutError(f"payload length {plen} does not match cell {cw}x{ch}")
    payload = np.frombuffer(data, np.uint8, count=plen, offset=off).reshape(2 * ch, 2 * cw, 3)
    quads = tuple(quads)
    _validate_layout(quads, payload)
    return CompositeFrame(seq, ts, quads, payload)
