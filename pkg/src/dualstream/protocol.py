"""Session state machine and the state-channel wire format.

Every message carries an envelope ``(peer_id, seq, timestamp_us)``; ``seq`` is
monotone per sender. :func:`apply` is a pure transition
``RoomState x Message -> RoomState``.

Replication rules:

* per-peer registers (pose, representations, call mode, pointer) are
  last-writer-wins on the owner's ``seq``; stale updates are dropped;
* snapshot visibility may be toggled by anyone and is a last-writer-wins
  register ordered by ``(timestamp_us, peer_id, seq)``;
* ``last_seen_us`` only ever grows (max).

These make transitions from different senders commute, so replicas that see
each sender's stream in order converge regardless of interleaving. Deleted
snapshot ids leave tombstones, so a hide or delete that loses a race with a
delete is a no-op. A message naming a snapshot the replica has not seen yet
raises UnknownSnapshotError; callers retry it after later deliveries.
"""

from __future__ import annotations

import enum
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np

from ._crc import crc32
from .composite import CompositeFrame, Quadrant, Unpacked
from .errors import (
    DuplicateSnapshotError,
    InvalidPointError,
    RoomFullError,
    StreamInactiveError,
    TruncatedError,
    UnknownPeerError,
    UnknownSnapshotError,
    UnknownTagError,
    WireFormatError,
    ChecksumError,
)
from .geometry import Intrinsics, Pose, Vec3, unproject
from .pointcloud import make_spatial_quad

MAX_PEERS = 4
ANNOTATION_DISTANCE = 1.0


class SelfRep(enum.IntEnum):
    HOLOGRAM_3D = 0
    SPATIAL_VIDEO = 1
    SPATIAL_VIDEO_NO_BACKGROUND = 2
    OFF = 3  # shown as a small marker cube


class EnvRep(enum.IntEnum):
    HOLOGRAM = 0
    VIDEO_FEED = 1
    OFF = 2


class CallMode(enum.IntEnum):
    AR = 0
    SCREEN = 1


class SnapshotKind(enum.IntEnum):
    VIDEO_FRAME = 0
    HOLOGRAM = 1


# --- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    peer_id: str
    seq: int
    timestamp_us: int

    TAG: ClassVar[int] = 0


@dataclass(frozen=True)
class Join(Message):
    TAG: ClassVar[int] = 1


@dataclass(frozen=True)
class Leave(Message):
    TAG: ClassVar[int] = 2


@dataclass(frozen=True)
class PoseUpdate(Message):
    pose: Pose = field(default_factory=Pose)
    TAG: ClassVar[int] = 3


@dataclass(frozen=True)
class SelfRepChange(Message):
    mode: SelfRep = SelfRep.HOLOGRAM_3D
    TAG: ClassVar[int] = 4


@dataclass(frozen=True)
class EnvRepChange(Message):
    mode: EnvRep = EnvRep.HOLOGRAM
    TAG: ClassVar[int] = 5


@dataclass(frozen=True)
class ModeSwitch(Message):
    mode: CallMode = CallMode.AR
    TAG: ClassVar[int] = 6


@dataclass(frozen=True)
class SnapshotCreate(Message):
    snapshot_id: str = ""
    kind: SnapshotKind = SnapshotKind.HOLOGRAM
    capture_pose: Pose = field(default_factory=Pose)
    intrinsics_digest: bytes = bytes(8)
    payload_ref: str = ""
    coverage: tuple[Vec3, Vec3, Vec3, Vec3] = ((0.0,) * 3,) * 4
    TAG: ClassVar[int] = 7


@dataclass(frozen=True)
class SnapshotVisibility(Message):
    snapshot_id: str = ""
    visible: bool = True
    TAG: ClassVar[int] = 8


@dataclass(frozen=True)
class SnapshotDelete(Message):
    snapshot_id: str = ""
    TAG: ClassVar[int] = 9


@dataclass(frozen=True)
class Pointer(Message):
    origin: Vec3 = (0.0, 0.0, 0.0)
    direction: Vec3 = (0.0, 0.0, 1.0)
    active: bool = True
    TAG: ClassVar[int] = 10


@dataclass(frozen=True)
class AnchorRepositioned(Message):
    TAG: ClassVar[int] = 11


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TAG: cls for cls in (Join, Leave, PoseUpdate, SelfRepChange, EnvRepChange, ModeSwitch,
                             SnapshotCreate, SnapshotVisibility, SnapshotDelete, Pointer,
                             AnchorRepositioned)
}


# --- wire format --------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64s(self, vals):
        self.parts.append(struct.pack(f"<{len(vals)}d", *vals))

    def raw(self, b: bytes):
        self.parts.append(b)

    def str(self, s: str):
        b = s.encode("utf-8")
        if len(b) > 0xFFFF:
            raise ValueError("string field longer than 65535 bytes")
        self.parts.append(struct.pack("<H", len(b)) + b)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise TruncatedError(f"message value truncated at byte {self.off}")
        b = self.data[self.off:self.off + n]
        self.off += n
        return b

    def u8(self) -> int:
        return self.take(1)[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64s(self, n: int) -> tuple[float, ...]:
        vals = struct.unpack(f"<{n}d", self.take(8 * n))
        if not all(math.isfinite(v) for v in vals):
            raise WireFormatError("non-finite float in message")
        return vals

    def str(self) -> str:
        (n,) = struct.unpack("<H", self.take(2))
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise WireFormatError("string field is not valid UTF-8") from None

    def flag(self) -> bool:
        v = self.u8()
        if v > 1:
            raise WireFormatError(f"boolean field must be 0 or 1, got {v}")
        return bool(v)

    def enum(self, cls):
        v = self.u8()
        try:
            return cls(v)
        except ValueError:
            raise WireFormatError(f"bad {cls.__name__} value {v}") from None

    def pose(self) -> Pose:
        vals = self.f64s(7)
        try:
            return Pose(vals[:3], vals[3:])
        except ValueError as exc:
            raise WireFormatError(f"bad pose: {exc}") from None


_TL = struct.Struct("<BI")
_CRC = struct.Struct("<I")


def _write_body(w: _Writer, m: Message) -> None:
    if isinstance(m, PoseUpdate):
        w.f64s(m.pose.as_tuple())
    elif isinstance(m, (SelfRepChange, EnvRepChange, ModeSwitch)):
        w.u8(int(m.mode))
    elif isinstance(m, SnapshotCreate):
        if len(m.intrinsics_digest) != 8:
            raise ValueError("intrinsics_digest must be 8 bytes")
        w.str(m.snapshot_id)
        w.u8(int(m.kind))
        w.f64s(m.capture_pose.as_tuple())
        w.raw(bytes(m.intrinsics_digest))
        w.str(m.payload_ref)
        w.f64s([c for corner in m.coverage for c in corner])
    elif isinstance(m, SnapshotVisibility):
        w.str(m.snapshot_id)
        w.u8(int(m.visible))
    elif isinstance(m, SnapshotDelete):
        w.str(m.snapshot_id)
    elif isinstance(m, Pointer):
        w.f64s(tuple(m.origin) + tuple(m.direction))
        w.u8(int(m.active))


def _read_body(r: _Reader, cls: type[Message], env: dict) -> Message:
    if cls is PoseUpdate:
        return cls(**env, pose=r.pose())
    if cls is SelfRepChange:
        return cls(**env, mode=r.enum(SelfRep))
    if cls is EnvRepChange:
        return cls(**env, mode=r.enum(EnvRep))
    if cls is ModeSwitch:
        return cls(**env, mode=r.enum(CallMode))
    if cls is SnapshotCreate:
        sid = r.str()
        kind = r.enum(SnapshotKind)
        pose = r.pose()
        digest = r.take(8)
        ref = r.str()
        flat = r.f64s(12)
        cov = tuple(tuple(flat[i:i + 3]) for i in range(0, 12, 3))
        return cls(**env, snapshot_id=sid, kind=kind, capture_pose=pose,
                   intrinsics_digest=digest, payload_ref=ref, coverage=cov)
    if cls is SnapshotVisibility:
        return cls(**env, snapshot_id=r.str(), visible=r.flag())
    if cls is SnapshotDelete:
        return cls(**env, snapshot_id=r.str())
    if cls is Pointer:
        vals = r.f64s(6)
        return cls(**env, origin=vals[:3], direction=vals[3:], active=r.flag())
    return cls(**env)


def encode_message(msg: Message) -> bytes:
    """tag u8 | length u32 | value | crc32 u32, little-endian (docs/wire-format.md)."""
    w = _Writer()
    w.str(msg.peer_id)
    w.u64(msg.seq)
    w.u64(msg.timestamp_us)
    _write_body(w, msg)
    value = w.bytes()
    head = _TL.pack(msg.TAG, len(value))
    return head + value + _CRC.pack(crc32(value, crc32(head)))


def decode_message(data: bytes) -> Message:
    data = bytes(data)
    if len(data) < _TL.size + _CRC.size:
        raise TruncatedError(f"message needs at least {_TL.size + _CRC.size} bytes, got {len(data)}")
    tag, length = _TL.unpack_from(data, 0)
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise UnknownTagError(f"unknown message tag {tag}")
    end = _TL.size + length
    if len(data) < end + _CRC.size:
        raise TruncatedError(f"message value truncated: header says {length} bytes")
    if len(data) > end + _CRC.size:
        raise WireFormatError("trailing bytes after message")
    (crc,) = _CRC.unpack_from(data, end)
    if crc32(data[:end]) != crc:
        raise ChecksumError("message CRC32 mismatch")
    r = _Reader(data[_TL.size:end])
    env = {"peer_id": r.str(), "seq": r.u64(), "timestamp_us": r.u64()}
    msg = _read_body(r, cls, env)
    if r.off != length:
        raise WireFormatError(f"{length - r.off} unparsed bytes in {cls.__name__}")
    return msg


# --- replicated state ---------------------------------------------------------

@dataclass(frozen=True)
class PointerRay:
    origin: Vec3
    direction: Vec3


@dataclass(frozen=True)
class PeerState:
    pose: Pose = field(default_factory=Pose)
    pose_seq: int = -1
    self_rep: SelfRep = SelfRep.HOLOGRAM_3D
    self_rep_seq: int = -1
    env_rep: EnvRep = EnvRep.HOLOGRAM
    env_rep_seq: int = -1
    call_mode: CallMode = CallMode.AR
    call_mode_seq: int = -1
    pointer: PointerRay | None = None
    pointer_seq: int = -1
    anchor_epoch: int = 0
    last_seen_us: int = 0


@dataclass(frozen=True)
class Coverage:
    """Snapshot annotation: capture origin marker and the covered image plane."""

    origin: Vec3
    corners: tuple[Vec3, Vec3, Vec3, Vec3]


@dataclass(frozen=True)
class Snapshot:
    id: str
    owner: str
    kind: SnapshotKind
    capture_pose: Pose
    coverage: Coverage
    intrinsics_digest: bytes
    payload_ref: str
    visible: bool = True
    visibility_stamp: tuple[int, str, int] = (0, "", -1)


@dataclass(frozen=True)
class RoomState:
    peers: dict[str, PeerState] = field(default_factory=dict)
    snapshots: dict[str, Snapshot] = field(default_factory=dict)
    max_peers: int = MAX_PEERS
    # ids of deleted snapshots, so late hide/delete messages stay harmless
    tombstones: frozenset[str] = frozenset()


def _with_peer(state: RoomState, pid: str, ps: PeerState) -> RoomState:
    peers = dict(state.peers)
    peers[pid] = ps
    return replace(state, peers=peers)


def _touch(ps: PeerState, ts: int, **changes) -> PeerState:
    return replace(ps, last_seen_us=max(ps.last_seen_us, ts), **changes)


def apply(state: RoomState, msg: Message) -> RoomState:
    """Apply one message; returns a new state and never mutates ``state``."""
    pid = msg.peer_id
    if isinstance(msg, Join):
        if pid in state.peers:
            return _with_peer(state, pid, _touch(state.peers[pid], msg.timestamp_us))
        if len(state.peers) >= state.max_peers:
            raise RoomFullError(f"room already has {state.max_peers} peers; {pid!r} cannot join")
        return _with_peer(state, pid, PeerState(last_seen_us=msg.timestamp_us))

    ps = state.peers.get(pid)
    if ps is None:
        raise UnknownPeerError(f"{type(msg).__name__} from unknown peer {pid!r}")
    ts = msg.timestamp_us

    if isinstance(msg, Leave):
        peers = dict(state.peers)
        del peers[pid]
        return replace(state, peers=peers)
    if isinstance(msg, PoseUpdate):
        if msg.seq <= ps.pose_seq:
            return state
        return _with_peer(state, pid, _touch(ps, ts, pose=msg.pose, pose_seq=msg.seq))
    if isinstance(msg, SelfRepChange):
        if msg.seq <= ps.self_rep_seq:
            return state
        return _with_peer(state, pid, _touch(ps, ts, self_rep=msg.mode, self_rep_seq=msg.seq))
    if isinstance(msg, EnvRepChange):
        if msg.seq <= ps.env_rep_seq:
            return state
        return _with_peer(state, pid, _touch(ps, ts, env_rep=msg.mode, env_rep_seq=msg.seq))
    if isinstance(msg, ModeSwitch):
        if msg.seq <= ps.call_mode_seq:
            return state
        return _with_peer(state, pid, _touch(ps, ts, call_mode=msg.mode, call_mode_seq=msg.seq))
    if isinstance(msg, Pointer):
        if msg.seq <= ps.pointer_seq:
            return state
        ray = PointerRay(tuple(msg.origin), tuple(msg.direction)) if msg.active else None
        return _with_peer(state, pid, _touch(ps, ts, pointer=ray, pointer_seq=msg.seq))
    if isinstance(msg, AnchorRepositioned):
        # seq of the latest repositioning, so redelivery is harmless
        return _with_peer(state, pid, _touch(ps, ts, anchor_epoch=max(ps.anchor_epoch, msg.seq)))

    if isinstance(msg, SnapshotCreate):
        if msg.snapshot_id in state.snapshots or msg.snapshot_id in state.tombstones:
            raise DuplicateSnapshotError(f"snapshot {msg.snapshot_id!r} already exists")
        snap = Snapshot(
            id=msg.snapshot_id, owner=pid, kind=msg.kind, capture_pose=msg.capture_pose,
            coverage=Coverage(msg.capture_pose.translation, tuple(tuple(c) for c in msg.coverage)),
            intrinsics_digest=bytes(msg.intrinsics_digest), payload_ref=msg.payload_ref,
            visible=True, visibility_stamp=(ts, pid, msg.seq),
        )
        snaps = dict(state.snapshots)
        snaps[msg.snapshot_id] = snap
        return replace(_with_peer(state, pid, _touch(ps, ts)), snapshots=snaps)
    if isinstance(msg, SnapshotVisibility):
        snap = state.snapshots.get(msg.snapshot_id)
        out = _with_peer(state, pid, _touch(ps, ts))
        if snap is None:
            if msg.snapshot_id in state.tombstones:
                return out
            raise UnknownSnapshotError(f"no snapshot {msg.snapshot_id!r}")
        stamp = (ts, pid, msg.seq)
        if stamp > snap.visibility_stamp:
            snaps = dict(state.snapshots)
            snaps[msg.snapshot_id] = replace(snap, visible=msg.visible, visibility_stamp=stamp)
            out = replace(out, snapshots=snaps)
        return out
    if isinstance(msg, SnapshotDelete):
        out = _with_peer(state, pid, _touch(ps, ts))
        if msg.snapshot_id in state.tombstones:
            return out
        if msg.snapshot_id not in state.snapshots:
            raise UnknownSnapshotError(f"no snapshot {msg.snapshot_id!r}")
        snaps = dict(state.snapshots)
        del snaps[msg.snapshot_id]
        return replace(out, snapshots=snaps, tombstones=state.tombstones | {msg.snapshot_id})
    raise TypeError(f"unsupported message type {type(msg).__name__}")


def apply_all(state: RoomState, msgs) -> RoomState:
    for m in msgs:
        state = apply(state, m)
    return state


def encode_state(state: RoomState) -> bytes:
    """Canonical byte form (sorted keys) used for digests and replay checks."""
    w = _Writer()
    w.u8(state.max_peers)
    w.u64(len(state.peers))
    for pid in sorted(state.peers):
        ps = state.peers[pid]
        w.str(pid)
        w.f64s(ps.pose.as_tuple())
        for v in (ps.pose_seq, ps.self_rep_seq, ps.env_rep_seq, ps.call_mode_seq, ps.pointer_seq):
            w.u64(v + 1)
        w.u8(int(ps.self_rep))
        w.u8(int(ps.env_rep))
        w.u8(int(ps.call_mode))
        w.u8(ps.pointer is not None)
        if ps.pointer is not None:
            w.f64s(tuple(ps.pointer.origin) + tuple(ps.pointer.direction))
        w.u64(ps.anchor_epoch)
        w.u64(ps.last_seen_us)
    w.u64(len(state.snapshots))
    for sid in sorted(state.snapshots):
        s = state.snapshots[sid]
        w.str(sid)
        w.str(s.owner)
        w.u8(int(s.kind))
        w.f64s(s.capture_pose.as_tuple())
        w.f64s(tuple(s.coverage.origin) + tuple(c for corner in s.coverage.corners for c in corner))
        w.raw(s.intrinsics_digest)
        w.str(s.payload_ref)
        w.u8(int(s.visible))
        w.u64(s.visibility_stamp[0])
        w.str(s.visibility_stamp[1])
        w.u64(s.visibility_stamp[2] + 1)
    w.u64(len(state.tombstones))
    for sid in sorted(state.tombstones):
        w.str(sid)
    return w.bytes()


def state_digest(state: RoomState) -> str:
    return hashlib.sha256(encode_state(state)).hexdigest()


# --- message builders ---------------------------------------------------------

def intrinsics_digest(k: Intrinsics) -> bytes:
    text = f"{k.fx!r},{k.fy!r},{k.cx!r},{k.cy!r},{k.width},{k.height}"
    return hashlib.blake2b(text.encode("ascii"), digest_size=8).digest()


def point_at(u: float, v: float, k: Intrinsics, device_pose: Pose, *,
             peer_id: str, seq: int, timestamp_us: int, active: bool = True) -> Pointer:
    """Laser-pointer ray through the touched pixel, in the anchor frame."""
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise InvalidPointError(f"touch ({u}, {v}) outside {k.width}x{k.height} display")
    d = device_pose.rotate_vector(unproject(u, v, 1.0, k))
    d = d / np.linalg.norm(d)
    return Pointer(peer_id, seq, timestamp_us, origin=device_pose.translation,
                   direction=tuple(float(c) for c in d), active=active)


def take_snapshot(peer_id: str, seq: int, timestamp_us: int, kind: SnapshotKind,
                  frames: Unpacked | CompositeFrame, device_pose: Pose, k: Intrinsics, *,
                  annotation_distance: float = ANNOTATION_DISTANCE,
                  source_id: str | None = None) -> SnapshotCreate:
    """Freeze the current environment stream at ``device_pose``.

    ``payload_ref`` names the environment quadrants of the composite the
    snapshot was taken from: ``composite:<source>:<seq>:env``.
    """
    quads = frames.quadrants
    need = [Quadrant.ENV_COLOR] + ([Quadrant.ENV_DEPTH] if kind is SnapshotKind.HOLOGRAM else [])
    missing = [q.name for q in need if not quads[q].present]
    if missing:
        raise StreamInactiveError(f"{kind.name} snapshot needs {missing} in the current composite")
    quad = make_spatial_quad(device_pose, k, annotation_distance)
    return SnapshotCreate(
        peer_id, seq, timestamp_us,
        snapshot_id=f"{peer_id}/{seq}",
        kind=kind,
        capture_pose=device_pose,
        intrinsics_digest=intrinsics_digest(k),
        payload_ref=f"composite:{source_id or peer_id}:{frames.seq}:env",
        coverage=tuple(tuple(float(c) for c in corner) for corner in quad.corners),
    )


class Outbox:
    """Stamps outgoing messages for one peer with a monotone sequence number."""

    def __init__(self, peer_id: str):
        self.peer_id = peer_id
        self.seq = 0

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def make(self, cls: type[Message], timestamp_us: int, **fields) -> Message:
        return cls(self.peer_id, self.next_seq(), timestamp_us, **fields)
