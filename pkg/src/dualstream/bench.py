"""Throughput benchmark of the full per-frame pipeline on synthetic frames.

One iteration: encode both depth streams, pack, serialize, parse, unpack,
decode both depth quadrants and reconstruct both holograms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import composite as comp
from . import depthcodec as codec
from .geometry import Pose, intrinsics_from_fov
from .pointcloud import reconstruct_hologram
from .scenes import parse_scene

STAGES = ("encode", "pack", "serialize", "parse", "unpack", "decode", "reconstruct")


@dataclass
class BenchReport:
    width: int
    height: int
    iterations: int
    total_s: float = 0.0
    stage_s: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    points: int = 0
    bytes_per_frame: int = 0

    @property
    def fps(self) -> float:
        return self.iterations / self.total_s if self.total_s > 0 else 0.0

    def as_dict(self) -> dict[str, str]:
        if self.iterations == 0:
            return {}
        out = {
            "resolution": f"{self.width}x{self.height}",
            "iterations": str(self.iterations),
            "fps": f"{self.fps:.2f}",
            "frame_ms_mean": f"{1000 * self.total_s / self.iterations:.3f}",
            "composite_bytes": str(self.bytes_per_frame),
            "points_per_frame": str(self.points),
        }
        for s in STAGES:
            out[f"stage_ms.{s}"] = f"{1000 * self.stage_s[s] / self.iterations:.3f}"
        return out

    def text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())


def run_bench(width: int = 640, height: int = 480, iterations: int = 100, *, warmup: int = 2) -> BenchReport:
    """Time ``iterations`` full pipeline passes after ``warmup`` untimed ones."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    rep = BenchReport(width, height, iterations)
    if iterations == 0:
        return rep
    k = intrinsics_from_fov(69.0, 42.0, width, height)
    self_scene, env_scene = parse_scene("sphere:0.45:0.15:0.7"), parse_scene("ramp:0.3:1.95")
    frames = [(self_scene.render(k, i), env_scene.render(k, i)) for i in range(2)]
    pose = Pose()
    clock = time.perf_counter

    for i in range(warmup + iterations):
        (sc, sd), (ec, ed) = frames[i % len(frames)]
        t0 = clock()
        sd_rgb = codec.encode_depth(sd, codec.SELF_PROFILE)
        ed_rgb = codec.encode_depth(ed, codec.ENV_PROFILE)
        t1 = clock()
        f = comp.pack(sc, sd_rgb, ec, ed_rgb, i, i, self_params=codec.SELF_PROFILE, env_params=codec.ENV_PROFILE)
        t2 = clock()
        wire = comp.serialize(f)
        t3 = clock()
        g = comp.parse(wire)
        t4 = clock()
        up = comp.unpack(g)
        t5 = clock()
        self_m = codec.decode_depth_m(up.self_depth, codec.profile_for_digest(g.quadrants[1].params_digest))
        env_m = codec.decode_depth_m(up.env_depth, codec.profile_for_digest(g.quadrants[3].params_digest))
        t6 = clock()
        a = reconstruct_hologram(up.self_color, self_m, k, pose)
        b = reconstruct_hologram(up.env_color, env_m, k, pose)
        t7 = clock()
        if i < warmup:
            continue
        for s, dt in zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4, t6 - t5, t7 - t6)):
            rep.stage_s[s] += dt
        rep.total_s += t7 - t0
        rep.points = len(a) + len(b)
        rep.bytes_per_frame = len(wire)
    return rep
