"""Scripted multi-peer sessions over the simulated two-channel network.

Script format: one command per line, ``<time_ms> <target> <verb> [args]``.
``target`` is a peer id or ``*`` for session-wide settings; ``#`` starts a
comment. See docs/session-scripts.md for the verb reference.

The report is always computed from the event log, so a saved ``events.log``
is enough to regenerate ``report.txt``.
"""

from __future__ import annotations

import logging
import math
import os
import re
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import composite as comp
from . import depthcodec as codec
from . import netsim, protocol
from .config import parse_floats
from .errors import ConfigError, ProtocolError, ScriptError, UnknownSnapshotError
from .frames import DepthFrame, format_ppm
from .geometry import AnchorFrame, Intrinsics, Pose, from_anchor_frame, intrinsics_from_fov, to_anchor_frame
from .netsim import DegradationModel, EventLog, EventQueue, Link, LinkModel
from .pointcloud import export_ply, hologram_grid, make_spatial_quad, reconstruct_hologram
from .protocol import (
    CallMode, EnvRep, RoomState, SelfRep, SnapshotKind,
)
from .scenes import PnmSequence, parse_scene

logger = logging.getLogger(__name__)

_SELF_REPS = {"hologram3d": SelfRep.HOLOGRAM_3D, "spatial_video": SelfRep.SPATIAL_VIDEO,
              "spatial_video_nobg": SelfRep.SPATIAL_VIDEO_NO_BACKGROUND, "off": SelfRep.OFF}
_ENV_REPS = {"hologram": EnvRep.HOLOGRAM, "video": EnvRep.VIDEO_FEED, "off": EnvRep.OFF}
_MODES = {"ar": CallMode.AR, "screen": CallMode.SCREEN}
_SNAP_KINDS = {"hologram": SnapshotKind.HOLOGRAM, "video": SnapshotKind.VIDEO_FRAME}

_GLOBAL_VERBS = {"seed", "fps", "duration", "link", "degrade", "processing", "resolution"}
_PEER_VERBS = {"define", "join", "leave", "pose", "selfrep", "envrep", "mode", "snapshot",
               "snapshot-show", "snapshot-hide", "snapshot-delete", "point", "point-end", "anchor"}

_PEER_ID = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")

# priorities for events sharing a timestamp
_P_CMD, _P_STATE, _P_AV, _P_CAPTURE = 0, 1, 2, 3

# sent composites kept per sender for ground-truth comparison at receivers
_KEEP_SENT = 256

# pixel sample grid used for the cross-peer consistency metric
_SAMPLE_GRID = (8, 4)


@dataclass
class Command:
    line: int
    t_us: int
    target: str
    verb: str
    args: list[str]
    kv: dict[str, str]


@dataclass
class PeerSpec:
    peer_id: str
    anchor: Pose
    env_k: Intrinsics
    self_k: Intrinsics
    env_source: object | None
    self_source: object | None
    line: int


@dataclass
class SessionConfig:
    seed: int = 0
    fps: float = 30.0
    duration_us: int | None = None
    resolution: tuple[int, int] = (160, 120)
    state_link: LinkModel = field(default_factory=lambda: LinkModel(50.0, 10.0, 0.0))
    av_link: LinkModel = field(default_factory=lambda: LinkModel(100.0, 20.0, 0.0))
    degradation: DegradationModel = field(default_factory=DegradationModel)
    sender_ms: float = 15.0
    receiver_ms: float = 15.0


@dataclass
class Script:
    config: SessionConfig
    peers: dict[str, PeerSpec]
    commands: list[Command]
    end_us: int


def _pose_arg(text: str, what: str) -> Pose:
    vals = [v for v in text.split(",") if v.strip()]
    if len(vals) == 3:
        return Pose(parse_floats(text, 3, what))
    v = parse_floats(text, 7, what)
    return Pose(v[:3], v[3:])


def _resolution(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m or int(m.group(1)) == 0 or int(m.group(2)) == 0:
        raise ConfigError(f"resolution must look like 640x480, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _split(line: str, lineno: int) -> Command | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split()
    if len(parts) < 3:
        raise ScriptError("expected '<time_ms> <target> <verb> [args]'", lineno)
    try:
        t_ms = float(parts[0])
    except ValueError:
        raise ScriptError(f"bad timestamp {parts[0]!r}", lineno) from None
    if not math.isfinite(t_ms) or t_ms < 0:
        raise ScriptError(f"timestamp must be a non-negative number, got {parts[0]!r}", lineno)
    args, kv = [], {}
    for p in parts[3:]:
        if "=" in p:
            k, v = p.split("=", 1)
            if k in kv:
                raise ScriptError(f"duplicate argument {k!r}", lineno)
            kv[k] = v
        else:
            args.append(p)
    return Command(lineno, int(round(t_ms * 1000)), parts[1], parts[2].lower(), args, kv)


def _source(kv: dict[str, str], prefix: str, base_dir: str):
    if f"{prefix}_ppm" in kv or f"{prefix}_pgm" in kv:
        # relative globs resolve next to the script
        return PnmSequence(os.path.join(base_dir, kv.get(f"{prefix}_ppm", "")),
                           os.path.join(base_dir, kv.get(f"{prefix}_pgm", "")))
    spec = kv.get(prefix, "none")
    return None if spec == "none" else parse_scene(spec)


def parse_script(text: str, base_dir: str | None = None) -> Script:
    """Parse and validate a session script; errors carry line numbers."""
    cfg = SessionConfig()
    peers: dict[str, PeerSpec] = {}
    commands: list[Command] = []
    joined: set[str] = set()
    last_t = 0
    base_dir = base_dir or os.getcwd()
    for lineno, line in enumerate(text.splitlines(), 1):
        cmd = _split(line, lineno)
        if cmd is None:
            continue
        if cmd.t_us < last_t:
            raise ScriptError(f"timestamp {cmd.t_us / 1000:g} ms goes backwards", lineno)
        last_t = cmd.t_us
        try:
            if cmd.target == "*":
                _global(cfg, cmd)
                continue
            if cmd.verb not in _PEER_VERBS:
                raise ScriptError(f"unknown verb {cmd.verb!r}", lineno)
            if cmd.verb == "define":
                if cmd.target in peers:
                    raise ScriptError(f"peer {cmd.target!r} defined twice", lineno)
                if not _PEER_ID.match(cmd.target):
                    raise ScriptError(f"bad peer id {cmd.target!r}", lineno)
                peers[cmd.target] = _define(cmd, cfg, base_dir)
                continue
            if cmd.target not in peers:
                raise ScriptError(f"peer {cmd.target!r} used before definition", lineno)
            _check_peer_command(cmd, peers[cmd.target], joined)
            commands.append(cmd)
        except ScriptError:
            raise
        except (ConfigError, ValueError) as exc:
            raise ScriptError(str(exc), lineno) from None
        except (IndexError, KeyError):
            raise ScriptError(f"{cmd.verb}: missing argument", lineno) from None
    end = cfg.duration_us if cfg.duration_us is not None else last_t + 1_000_000
    return Script(cfg, peers, commands, end)


def _global(cfg: SessionConfig, cmd: Command) -> None:
    v, a, kv = cmd.verb, cmd.args, cmd.kv
    if v not in _GLOBAL_VERBS:
        raise ScriptError(f"unknown session setting {v!r}", cmd.line)
    if v == "seed":
        cfg.seed = int(a[0])
    elif v == "fps":
        cfg.fps = float(a[0])
        if not cfg.fps > 0:
            raise ConfigError("fps must be positive")
    elif v == "duration":
        cfg.duration_us = int(round(float(a[0]) * 1000))
    elif v == "resolution":
        cfg.resolution = _resolution(a[0])
    elif v == "link":
        if not a or a[0] not in ("state", "av"):
            raise ConfigError("link needs 'state' or 'av'")
        if a[0] == "state":
            cfg.state_link = LinkModel.from_config(kv, cfg.state_link)
        else:
            cfg.av_link = LinkModel.from_config(kv, cfg.av_link)
    elif v == "degrade":
        cfg.degradation = DegradationModel.from_config(kv, cfg.degradation)
    elif v == "processing":
        extra = set(kv) - {"sender_ms", "receiver_ms"}
        if extra:
            raise ConfigError(f"unknown processing keys {sorted(extra)}")
        cfg.sender_ms = float(kv.get("sender_ms", cfg.sender_ms))
        cfg.receiver_ms = float(kv.get("receiver_ms", cfg.receiver_ms))


def _define(cmd: Command, cfg: SessionConfig, base_dir: str) -> PeerSpec:
    kv = cmd.kv
    allowed = {"anchor", "hfov", "vfov", "self_hfov", "self_vfov", "res", "self_res",
               "env", "self", "env_ppm", "env_pgm", "self_ppm", "self_pgm"}
    extra = set(kv) - allowed
    if extra:
        raise ConfigError(f"unknown define keys {sorted(extra)}")
    w, h = _resolution(kv["res"]) if "res" in kv else cfg.resolution
    sw, sh = _resolution(kv["self_res"]) if "self_res" in kv else (w, h)
    env_k = intrinsics_from_fov(float(kv.get("hfov", 69.0)), float(kv.get("vfov", 42.0)), w, h)
    self_k = intrinsics_from_fov(float(kv.get("self_hfov", 69.0)), float(kv.get("self_vfov", 42.0)), sw, sh)
    anchor = _pose_arg(kv["anchor"], "anchor") if "anchor" in kv else Pose()
    return PeerSpec(cmd.target, anchor, env_k, self_k, _source(kv, "env", base_dir), _source(kv, "self", base_dir), cmd.line)


def _check_peer_command(cmd: Command, spec: PeerSpec, joined: set[str]) -> None:
    v, a = cmd.verb, cmd.args
    if v == "join":
        if cmd.target in joined:
            raise ScriptError(f"peer {cmd.target!r} already joined", cmd.line)
        if len(joined) >= protocol.MAX_PEERS:
            raise ScriptError(
                f"room full: {cmd.target!r} would be peer {len(joined) + 1} of at most {protocol.MAX_PEERS}",
                cmd.line)
        joined.add(cmd.target)
        return
    if cmd.target not in joined:
        raise ScriptError(f"peer {cmd.target!r} has not joined", cmd.line)
    if v == "leave":
        joined.discard(cmd.target)
    elif v in ("pose", "anchor"):
        if "t" not in cmd.kv and not a:
            raise ScriptError(f"{v} needs t=x,y,z [q=w,x,y,z] or a pose", cmd.line)
        _command_pose(cmd)
    elif v == "selfrep":
        _lookup(_SELF_REPS, a, cmd)
    elif v == "envrep":
        _lookup(_ENV_REPS, a, cmd)
    elif v == "mode":
        _lookup(_MODES, a, cmd)
    elif v == "snapshot":
        _lookup(_SNAP_KINDS, a, cmd)
    elif v in ("snapshot-show", "snapshot-hide", "snapshot-delete"):
        if len(a) != 1:
            raise ScriptError(f"{v} needs a snapshot id", cmd.line)
    elif v == "point":
        if len(a) != 2:
            raise ScriptError("point needs pixel coordinates u v", cmd.line)
        u, vv = float(a[0]), float(a[1])
        if not (0 <= u < spec.env_k.width and 0 <= vv < spec.env_k.height):
            raise ScriptError(f"touch ({u}, {vv}) outside the display", cmd.line)


def _lookup(table, args, cmd):
    if len(args) != 1 or args[0].lower() not in table:
        raise ScriptError(f"{cmd.verb} expects one of {sorted(table)}", cmd.line)
    return table[args[0].lower()]


def _command_pose(cmd: Command) -> Pose:
    if cmd.args:
        return _pose_arg(cmd.args[0], cmd.verb)
    t = parse_floats(cmd.kv["t"], 3, "t")
    q = parse_floats(cmd.kv["q"], 4, "q") if "q" in cmd.kv else (1.0, 0.0, 0.0, 0.0)
    return Pose(t, q)


# --- runtime ----------------------------------------------------------------

@dataclass
class _Sent:
    unpacked: comp.Unpacked
    truth_env: DepthFrame | None
    truth_self: DepthFrame | None


class _Peer:
    def __init__(self, spec: PeerSpec):
        self.spec = spec
        self.id = spec.peer_id
        self.anchor = AnchorFrame(spec.anchor)
        self.local_pose = Pose()
        self.outbox = protocol.Outbox(spec.peer_id)
        self.replica = RoomState()
        self.joined = False
        self.comp_seq = 0
        self.frame_index = 0
        self.latest: _Sent | None = None
        self.snapshot_frames: dict[str, tuple[comp.Unpacked, Pose]] = {}
        # sender -> seq -> camera-frame sample points (for the consistency metric)
        self.samples: dict[str, dict[int, np.ndarray]] = defaultdict(dict)
        # state messages waiting for the snapshot they refer to
        self.pending: list[tuple[protocol.Message, int]] = []

    @property
    def anchor_rel_pose(self) -> Pose:
        return to_anchor_frame(self.local_pose, self.anchor)


class Simulation:
    def __init__(self, script: Script, *, seed: int | None = None, measure_processing: bool = False):
        self.script = script
        self.cfg = script.config
        self.seed = self.cfg.seed if seed is None else seed
        self.measure = measure_processing
        self.peers = {pid: _Peer(spec) for pid, spec in script.peers.items()}
        self.queue = EventQueue()
        self.log = EventLog()
        self.links: dict[tuple[str, str, str], Link] = {}
        self.period_us = int(round(1e6 / self.cfg.fps))
        self.sent_store: dict[tuple[str, int], _Sent] = {}
        self.aliases: dict[str, str] = {}

    def _snap_id(self, cmd: Command) -> str:
        return self.aliases.get(cmd.args[0], cmd.args[0])

    def _link(self, channel: str, src: str, dst: str) -> Link:
        key = (channel, src, dst)
        if key not in self.links:
            base = self.cfg.state_link if channel == "state" else self.cfg.av_link
            model = LinkModel(base.base_latency_ms, base.jitter_ms, base.loss_prob,
                              (base.seed + self.seed) % 2**64)
            self.links[key] = Link(model, f"{channel}:{src}->{dst}")
        return self.links[key]

    def _push(self, t: int, prio: int, ev) -> None:
        self.queue.push((t, prio), ev)

    # --- state channel ---
    def _broadcast(self, t: int, sender: _Peer, msg: protocol.Message, line: int | None = None) -> None:
        wire = protocol.encode_message(msg)
        try:
            sender.replica = protocol.apply(sender.replica, msg)
        except ProtocolError as exc:
            raise ScriptError(str(exc), line) from None
        self.log.add(t, "state", "send", len(wire), src=sender.id, type=type(msg).__name__, seq=msg.seq)
        m = self.cfg.state_link
        rto_us = int(round((2 * m.base_latency_ms + 2 * m.jitter_ms + 10.0) * 1000))
        for dst in self.peers.values():
            if dst is sender:
                continue
            link = self._link("state", sender.id, dst.id)
            when = link.schedule_reliable(t, rto_us)
            self._push(when, _P_STATE, ("state", dst.id, wire))

    def _on_state(self, t: int, dst_id: str, wire: bytes) -> None:
        msg = protocol.decode_message(wire)
        dst = self.peers[dst_id]
        if not self._try_apply(t, dst, msg, len(wire)):
            return
        # a success may unblock messages that referenced a snapshot not yet seen
        progress = True
        while progress and dst.pending:
            progress = False
            for i, (pmsg, size) in enumerate(dst.pending):
                if self._try_apply(t, dst, pmsg, size, parked=True):
                    del dst.pending[i]
                    progress = True
                    break

    def _try_apply(self, t: int, dst: _Peer, msg: protocol.Message, size: int, parked: bool = False) -> bool:
        try:
            dst.replica = protocol.apply(dst.replica, msg)
        except UnknownSnapshotError:
            if not parked:
                dst.pending.append((msg, size))
                self.log.add(t, "state", "park", size, src=msg.peer_id, dst=dst.id, seq=msg.seq)
            return False
        except ProtocolError as exc:
            self.log.add(t, "state", "reject", size, src=msg.peer_id, dst=dst.id, seq=msg.seq,
                         reason=type(exc).__name__)
            return False
        self.log.add(t, "state", "deliver", size, src=msg.peer_id, dst=dst.id, seq=msg.seq)
        return True

    # --- script commands ---
    def _on_command(self, t: int, cmd: Command) -> None:
        p = self.peers[cmd.target]
        v = cmd.verb
        make = p.outbox.make
        if v == "join":
            p.joined = True
            self._broadcast(t, p, make(protocol.Join, t), cmd.line)
            self._broadcast(t, p, make(protocol.PoseUpdate, t, pose=p.anchor_rel_pose), cmd.line)
            first = -(-t // self.period_us) * self.period_us
            self._push(first, _P_CAPTURE, ("capture", p.id))
        elif v == "leave":
            p.joined = False
            self._broadcast(t, p, make(protocol.Leave, t), cmd.line)
        elif v == "pose":
            p.local_pose = _command_pose(cmd)
            self._broadcast(t, p, make(protocol.PoseUpdate, t, pose=p.anchor_rel_pose), cmd.line)
        elif v == "anchor":
            p.anchor = AnchorFrame(_command_pose(cmd))
            self._broadcast(t, p, make(protocol.AnchorRepositioned, t), cmd.line)
            self._broadcast(t, p, make(protocol.PoseUpdate, t, pose=p.anchor_rel_pose), cmd.line)
        elif v == "selfrep":
            self._broadcast(t, p, make(protocol.SelfRepChange, t, mode=_lookup(_SELF_REPS, cmd.args, cmd)), cmd.line)
        elif v == "envrep":
            self._broadcast(t, p, make(protocol.EnvRepChange, t, mode=_lookup(_ENV_REPS, cmd.args, cmd)), cmd.line)
        elif v == "mode":
            self._broadcast(t, p, make(protocol.ModeSwitch, t, mode=_lookup(_MODES, cmd.args, cmd)), cmd.line)
        elif v == "snapshot":
            kind = _lookup(_SNAP_KINDS, cmd.args, cmd)
            if p.latest is None:
                raise ScriptError("snapshot before any frame was captured", cmd.line)
            seq = p.outbox.next_seq()
            try:
                msg = protocol.take_snapshot(p.id, seq, t, kind, p.latest.unpacked, p.anchor_rel_pose,
                                             p.spec.env_k)
            except ProtocolError as exc:
                raise ScriptError(str(exc), cmd.line) from None
            p.snapshot_frames[msg.snapshot_id] = (p.latest.unpacked, msg.capture_pose)
            if "as" in cmd.kv:
                self.aliases[cmd.kv["as"]] = msg.snapshot_id
            self._broadcast(t, p, msg, cmd.line)
        elif v in ("snapshot-show", "snapshot-hide"):
            self._broadcast(t, p, make(protocol.SnapshotVisibility, t, snapshot_id=self._snap_id(cmd),
                                       visible=v == "snapshot-show"), cmd.line)
        elif v == "snapshot-delete":
            self._broadcast(t, p, make(protocol.SnapshotDelete, t, snapshot_id=self._snap_id(cmd)), cmd.line)
        elif v == "point":
            seq = p.outbox.next_seq()
            msg = protocol.point_at(float(cmd.args[0]), float(cmd.args[1]), p.spec.env_k, p.anchor_rel_pose,
                                    peer_id=p.id, seq=seq, timestamp_us=t)
            self._broadcast(t, p, msg, cmd.line)
        elif v == "point-end":
            self._broadcast(t, p, make(protocol.Pointer, t, origin=p.anchor_rel_pose.translation, active=False),
                            cmd.line)

    # --- AV channel ---
    def _on_capture(self, t: int, pid: str) -> None:
        p = self.peers[pid]
        if not p.joined or t >= self.script.end_us:
            return
        self._push(t + self.period_us, _P_CAPTURE, ("capture", pid))
        me = p.replica.peers.get(pid)
        if me is None:
            return
        spec = p.spec
        self_on = spec.self_source is not None and me.self_rep is not SelfRep.OFF
        env_on = spec.env_source is not None and me.env_rep is not EnvRep.OFF
        if not (self_on or env_on):
            return
        sc = sd = ec = ed = None
        truth_self = truth_env = None
        if self_on:
            sc, sd = spec.self_source.render(spec.self_k, p.frame_index)
        if env_on:
            ec, ed = spec.env_source.render(spec.env_k, p.frame_index)
        p.frame_index += 1
        # sender processing: encode, pack, compress and frame
        t0 = time.perf_counter()
        if self_on and me.self_rep is not SelfRep.SPATIAL_VIDEO:
            truth_self, sd = sd, codec.encode_depth(sd, codec.SELF_PROFILE)
        else:
            sd = None
        if env_on and me.env_rep is EnvRep.HOLOGRAM:
            truth_env, ed = ed, codec.encode_depth(ed, codec.ENV_PROFILE)
        else:
            ed = None
        p.comp_seq += 1
        seq = p.comp_seq
        frame = comp.pack(sc, sd, ec, ed, t, seq, self_params=codec.SELF_PROFILE, env_params=codec.ENV_PROFILE)
        frame = netsim.degrade(frame, self.cfg.degradation, _frame_seed(self.seed, pid, seq))
        wire = comp.serialize(frame)
        sender_us = self._elapsed_us(t0, self.cfg.sender_ms)
        sent = _Sent(comp.unpack(frame), truth_env, truth_self)
        p.latest = sent
        self.sent_store[(pid, seq)] = sent
        self.sent_store.pop((pid, seq - _KEEP_SENT), None)
        self.log.add(t, "av", "capture", len(wire), src=pid, seq=seq)
        # local preview of the outgoing stream
        _, decoded = self._present(p, pid, wire)
        self._quality(p, pid, seq, decoded)
        t_send = t + sender_us
        for dst in self.peers.values():
            if dst is p or not dst.joined:
                continue
            when = self._link("av", pid, dst.id).schedule(t_send, wire)
            if when is None:
                self.log.add(t_send, "av", "drop", len(wire), src=pid, dst=dst.id, seq=seq)
                continue
            self._push(when, _P_AV, ("av", dst.id, pid, wire, t, sender_us, when - t_send))

    def _elapsed_us(self, t0: float, modelled_ms: float) -> int:
        if self.measure:
            return int(round((time.perf_counter() - t0) * 1e6))
        return int(round(modelled_ms * 1000))

    def _present(self, receiver: _Peer, src: str, wire: bytes) -> tuple[int, dict[str, np.ndarray]]:
        """Receiver pipeline: parse, unpack, decode and reconstruct one composite.

        Returns the composite seq and decoded metric depth per stream.
        """
        frame = comp.parse(wire)
        up = comp.unpack(frame)
        spec = self.peers[src].spec
        pose_rel = receiver.replica.peers[src].pose if src in receiver.replica.peers else Pose()
        local = from_anchor_frame(pose_rel, receiver.anchor)
        decoded = {}
        for name, cq, dq, k in (
            ("self", comp.Quadrant.SELF_COLOR, comp.Quadrant.SELF_DEPTH, spec.self_k),
            ("env", comp.Quadrant.ENV_COLOR, comp.Quadrant.ENV_DEPTH, spec.env_k),
        ):
            if not up.quadrants[dq].present:
                continue
            params = codec.profile_for_digest(up.quadrants[dq].params_digest)
            depth_m = codec.decode_depth_m(up.frame(dq), params)
            reconstruct_hologram(up.frame(cq), depth_m, k, local)
            decoded[name] = depth_m
        return frame.seq, decoded

    def _quality(self, receiver: _Peer, src: str, seq: int, decoded: dict[str, np.ndarray]) -> dict[str, float]:
        """Compare decoded depth with the sender's ground truth; record consistency samples."""
        sent = self.sent_store.get((src, seq))
        spec = self.peers[src].spec
        out: dict[str, float] = {}
        for name, depth_m in decoded.items():
            k = spec.self_k if name == "self" else spec.env_k
            truth = None if sent is None else (sent.truth_self if name == "self" else sent.truth_env)
            if truth is not None:
                true_m = truth.meters()
                valid = true_m > 0
                if valid.any():
                    out[f"{name}_depth_rmse"] = float(np.sqrt(np.mean((depth_m[valid] - true_m[valid]) ** 2)))
                both = valid & (depth_m > 0)
                if both.any():
                    g_dec, _ = hologram_grid(depth_m, k, Pose())
                    g_true, _ = hologram_grid(true_m, k, Pose())
                    d2 = ((g_dec[both] - g_true[both]) ** 2).sum(axis=1)
                    out[f"{name}_cloud_rmse"] = float(np.sqrt(d2.mean()))
            if name == "env":
                gx, gy = _SAMPLE_GRID
                us = np.linspace(0, k.width - 1, gx).round().astype(int)
                vs = np.linspace(0, k.height - 1, gy).round().astype(int)
                cam, mask = hologram_grid(depth_m, k, Pose())
                bucket = receiver.samples[src]
                bucket[seq] = cam[np.ix_(vs, us)][mask[np.ix_(vs, us)]]
                if len(bucket) > 64:
                    del bucket[min(bucket)]
        return out

    def _on_av(self, t: int, dst_id: str, src: str, wire: bytes, capture_t: int, sender_us: int,
               net_us: int) -> None:
        dst = self.peers[dst_id]
        t0 = time.perf_counter()
        seq, decoded = self._present(dst, src, wire)
        receiver_us = self._elapsed_us(t0, self.cfg.receiver_ms)
        metrics = self._quality(dst, src, seq, decoded)
        latency = sender_us + net_us + receiver_us
        self.log.add(t + receiver_us, "av", "present", len(wire), src=src, dst=dst_id, seq=seq,
                     capture_us=capture_t, sender_us=sender_us, net_us=net_us, receiver_us=receiver_us,
                     latency_us=latency, **{k: v for k, v in sorted(metrics.items())})

    def run(self) -> SimResult:
        for cmd in self.script.commands:
            self._push(cmd.t_us, _P_CMD, ("cmd", cmd))
        while len(self.queue):
            (t, _prio), ev = self.queue.pop()
            kind = ev[0]
            if kind == "cmd":
                self._on_command(t, ev[1])
            elif kind == "state":
                self._on_state(t, ev[1], ev[2])
            elif kind == "capture":
                self._on_capture(t, ev[1])
            elif kind == "av":
                self._on_av(t, *ev[1:])
        end = max(self.script.end_us, max((r[0] for r in self.log.records), default=0))
        for p in self.peers.values():
            for msg, size in p.pending:
                self.log.add(end, "state", "reject", size, src=msg.peer_id, dst=p.id, seq=msg.seq,
                             reason="UnknownSnapshotError")
            self.log.add(end, "state", "digest", 0, peer=p.id, digest=protocol.state_digest(p.replica),
                         snapshots=len(p.replica.snapshots))
        self.log.add(end, "session", "consistency", 0, max_dev_m=self._consistency())
        self.log.add(end, "session", "end", 0, duration_us=self.script.end_us)
        return SimResult(self, self.log)

    def _consistency(self) -> float:
        """Max disagreement of pairwise point distances across peers, metres.

        Each peer places the latest commonly presented frame of every sender
        in its own local frame using its replicated anchor-relative pose.
        """
        senders = sorted({s for p in self.peers.values() for s in p.samples})
        per_peer: dict[str, np.ndarray] = {}
        chosen: dict[str, int] = {}
        holders = [p for p in self.peers.values() if p.samples]
        for s in senders:
            common = None
            for p in holders:
                seqs = set(p.samples.get(s, {}))
                common = seqs if common is None else common & seqs
            if common:
                chosen[s] = max(common)
        if len(holders) < 2 or not chosen:
            return 0.0
        for p in holders:
            pts = []
            for s, seq in sorted(chosen.items()):
                pose_rel = p.replica.peers[s].pose if s in p.replica.peers else Pose()
                pts.append(from_anchor_frame(pose_rel, p.anchor).transform_points(p.samples[s][seq]))
            per_peer[p.id] = np.vstack(pts)
        dmats = {pid: np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1) for pid, x in per_peer.items()}
        ids = sorted(dmats)
        dev = 0.0
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                dev = max(dev, float(np.abs(dmats[a] - dmats[b]).max()))
        return dev

    def snapshot_artifacts(self) -> dict[str, bytes]:
        """Files for every snapshot still present in the (first) final replica."""
        out: dict[str, bytes] = {}
        ref = next(iter(self.peers.values())).replica
        for sid, snap in sorted(ref.snapshots.items()):
            owner = self.peers.get(snap.owner)
            if owner is None or sid not in owner.snapshot_frames:
                continue
            up, pose = owner.snapshot_frames[sid]
            name = sid.replace("/", "_")
            if snap.kind is SnapshotKind.HOLOGRAM:
                params = codec.profile_for_digest(up.quadrants[comp.Quadrant.ENV_DEPTH].params_digest)
                depth_m = codec.decode_depth_m(up.env_depth, params)
                cloud = reconstruct_hologram(up.env_color, depth_m, owner.spec.env_k, pose)
                out[f"{name}.ply"] = export_ply(cloud)
            else:
                out[f"{name}.ppm"] = format_ppm(up.env_color)
                quad = make_spatial_quad(pose, owner.spec.env_k)
                out[f"{name}.quad.txt"] = "".join(
                    f"{x!r} {y!r} {z!r}\n" for x, y, z in quad.corners.tolist()).encode("ascii")
        return out


def _frame_seed(seed: int, pid: str, seq: int) -> list[int]:
    return [seed, int.from_bytes(pid.encode("utf-8")[:8].ljust(8, b"\0"), "little"), seq]


@dataclass
class SimResult:
    sim: Simulation
    log: EventLog

    @property
    def events_text(self) -> str:
        return self.log.text()

    def report(self) -> dict[str, str]:
        return report_from_events(self.events_text)

    def report_text(self) -> str:
        return format_report(self.report())

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "events.log"), "w", encoding="utf-8") as f:
            f.write(self.events_text)
        rep = self.report()
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
            f.write(format_report(rep))
        with open(os.path.join(out_dir, "state_digest.txt"), "w", encoding="utf-8") as f:
            f.write(rep["state_digest"] + "\n")
        snaps = self.sim.snapshot_artifacts()
        if snaps:
            sdir = os.path.join(out_dir, "snapshots")
            os.makedirs(sdir, exist_ok=True)
            for name, data in snaps.items():
                with open(os.path.join(sdir, name), "wb") as f:
                    f.write(data)


def _stats(vals: list[float]) -> tuple[float, float, float, float]:
    if not vals:
        return (0.0, 0.0, 0.0, 0.0)
    a = np.asarray(vals, dtype=float)
    return float(a.min()), float(a.mean()), float(np.percentile(a, 95)), float(a.max())


def _g(v: float) -> str:
    return f"{v:.9g}"


def report_from_events(text: str) -> dict[str, str]:
    """Derive the metrics report from an event log (``events.log``)."""
    recs = EventLog.parse(text)
    sent = delivered = dropped = captures = 0
    lat, net, snd, rcv = [], [], [], []
    rmse: dict[str, list[float]] = defaultdict(list)
    state_sent = state_delivered = state_rejected = 0
    digests: dict[str, str] = {}
    snapshots: dict[str, int] = {}
    consistency = 0.0
    duration_us = 0
    present_times: dict[tuple[str, str], list[int]] = defaultdict(list)
    for t, ch, ev, size, kv in recs:
        if ch == "av":
            if ev == "capture":
                captures += 1
            elif ev == "drop":
                sent += 1
                dropped += 1
            elif ev == "present":
                if kv["src"] == kv["dst"]:
                    continue
                sent += 1
                delivered += 1
                present_times[(kv["src"], kv["dst"])].append(t)
                lat.append(int(kv["latency_us"]) / 1000)
                net.append(int(kv["net_us"]) / 1000)
                snd.append(int(kv["sender_us"]) / 1000)
                rcv.append(int(kv["receiver_us"]) / 1000)
                for key in ("self_depth_rmse", "env_depth_rmse", "self_cloud_rmse", "env_cloud_rmse"):
                    if key in kv:
                        rmse[key].append(float(kv[key]))
        elif ch == "state":
            if ev == "send":
                state_sent += 1
            elif ev == "deliver":
                state_delivered += 1
            elif ev == "reject":
                state_rejected += 1
            elif ev == "digest":
                digests[kv["peer"]] = kv["digest"]
                snapshots[kv["peer"]] = int(kv["snapshots"])
        elif ch == "session":
            if ev == "consistency":
                consistency = float(kv["max_dev_m"])
            elif ev == "end":
                duration_us = int(kv["duration_us"])
    lmin, lmean, lp95, lmax = _stats(lat)
    rep = {
        "frames_sent": str(sent),
        "frames_delivered": str(delivered),
        "frames_dropped": str(dropped),
        "composites_captured": str(captures),
        "latency_ms_min": _g(lmin),
        "latency_ms_mean": _g(lmean),
        "latency_ms_p95": _g(lp95),
        "latency_ms_max": _g(lmax),
        "latency_sender_ms_mean": _g(_stats(snd)[1]),
        "latency_network_ms_mean": _g(_stats(net)[1]),
        "latency_network_ms_p95": _g(_stats(net)[2]),
        "latency_receiver_ms_mean": _g(_stats(rcv)[1]),
        "latency_receiver_ms_p95": _g(_stats(rcv)[2]),
    }
    for key in ("self_depth_rmse", "env_depth_rmse", "self_cloud_rmse", "env_cloud_rmse"):
        vals = rmse.get(key)
        rep[f"{key}_m"] = _g(float(np.mean(vals))) if vals else "nan"
    # presented frame rate per (sender, receiver) stream, averaged over streams
    rates = [(len(ts) - 1) / ((max(ts) - min(ts)) / 1e6) for ts in present_times.values()
             if len(ts) > 1 and max(ts) > min(ts)]
    rep["composite_fps"] = _g(float(np.mean(rates))) if rates else "0"
    rep["session_duration_ms"] = _g(duration_us / 1000)
    rep["state_messages_sent"] = str(state_sent)
    rep["state_messages_delivered"] = str(state_delivered)
    rep["state_messages_rejected"] = str(state_rejected)
    rep["pose_consistency_max_dev_m"] = _g(consistency)
    uniq = set(digests.values())
    rep["state_converged"] = "true" if len(uniq) == 1 else "false"
    rep["state_digest"] = next(iter(uniq)) if len(uniq) == 1 else "diverged"
    for pid in sorted(digests):
        rep[f"state_digest.{pid}"] = digests[pid]
    rep["snapshots"] = str(max(snapshots.values(), default=0))
    return rep


def format_report(rep: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in rep.items())


def load_script(path: str) -> Script:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_script(text, base_dir=os.path.dirname(os.path.abspath(path)))


def simulate(script: Script | str, *, seed: int | None = None, measure_processing: bool = False) -> SimResult:
    if isinstance(script, str):
        script = parse_script(script)
    return Simulation(script, seed=seed, measure_processing=measure_processing).run()
