"""Built-in synthetic RGB-D scenes and file-backed frame sequences.

Depth is camera-frame Z in millimetres (what a depth camera reports), so a
fronto-parallel wall has the same value at every pixel.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .frames import ColorFrame, DepthFrame, read_pgm, read_ppm
from .geometry import Intrinsics, pixel_rays


def _pattern(k: Intrinsics, frame: int) -> ColorFrame:
    u = np.arange(k.width)[None, :]
    v = np.arange(k.height)[:, None]
    r = u * 255 // max(k.width - 1, 1)
    g = v * 255 // max(k.height - 1, 1)
    b = ((u // 8 + v // 8 + frame) % 2) * 200 + 30
    return ColorFrame(np.stack(np.broadcast_arrays(r, g, b), axis=-1).astype(np.uint8))


@dataclass(frozen=True)
class Scene:
    kind: str
    params: tuple[float, ...]

    def depth_m(self, k: Intrinsics, frame: int = 0) -> np.ndarray:
        rx, ry = pixel_rays(k)
        shape = (k.height, k.width)
        p = self.params
        if self.kind == "wall":
            return np.full(shape, p[0])
        if self.kind == "ramp":
            near, far = p
            return np.broadcast_to(np.linspace(near, far, k.width), shape).copy()
        if self.kind == "step":
            near, far = p
            z = np.full(shape, far)
            z[:, : k.width // 2] = near
            return z
        if self.kind in ("sphere", "face"):
            center, radius = p[0], p[1]
            background = p[2] if len(p) > 2 else 0.0
            # ray (x, y, 1) * t hits sphere at (0, 0, center)
            a = rx * rx + ry * ry + 1.0
            bq = -2.0 * center
            c = center * center - radius * radius
            disc = bq * bq - 4 * a * c
            hit = disc >= 0
            t = np.where(hit, (-bq - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), 0.0)
            return np.where(hit, t, background)
        raise ConfigError(f"unknown scene kind {self.kind!r}")

    def render(self, k: Intrinsics, frame: int = 0) -> tuple[ColorFrame, DepthFrame]:
        return _pattern(k, frame), DepthFrame.from_meters(self.depth_m(k, frame))


_ARITY = {"wall": (1, 1), "ramp": (2, 2), "step": (2, 2), "sphere": (2, 3), "face": (2, 2)}


def parse_scene(spec: str) -> Scene:
    """``wall:1.5``, ``ramp:0.3:1.9``, ``step:0.8:1.6``, ``sphere:1.0:0.3[:bg]``, ``face[:0.4[:r]]``."""
    kind, *rest = spec.split(":")
    if kind not in _ARITY:
        raise ConfigError(f"unknown scene {kind!r}; choose from {sorted(_ARITY)}")
    try:
        vals = tuple(float(x) for x in rest)
    except ValueError:
        raise ConfigError(f"non-numeric scene parameter in {spec!r}") from None
    if kind == "face":
        # head-sized sphere at typical phone holding distance, no background
        vals = vals + (0.4, 0.09)[len(vals):]
    lo, hi = _ARITY[kind]
    if not lo <= len(vals) <= hi:
        raise ConfigError(f"scene {kind!r} takes {lo}..{hi} parameters, got {len(vals)}")
    if any(v < 0 for v in vals):
        raise ConfigError(f"scene parameters must be non-negative: {spec!r}")
    return Scene(kind, vals)


class PnmSequence:
    """Cycles through matching PPM/PGM files sorted by name."""

    def __init__(self, color_glob: str, depth_glob: str):
        self.color_paths = sorted(glob.glob(os.path.expanduser(color_glob)))
        self.depth_paths = sorted(glob.glob(os.path.expanduser(depth_glob)))
        if not self.color_paths or len(self.color_paths) != len(self.depth_paths):
            raise ConfigError(
                f"frame sequence needs equal, non-zero numbers of colour and depth files "
                f"(got {len(self.color_paths)} and {len(self.depth_paths)})")

    def render(self, k: Intrinsics, frame: int = 0) -> tuple[ColorFrame, DepthFrame]:
        i = frame % len(self.color_paths)
        c, d = read_ppm(self.color_paths[i]), read_pgm(self.depth_paths[i])
        if (c.width, c.height) != (k.width, k.height) or (d.width, d.height) != (k.width, k.height):
            raise ConfigError(f"{self.color_paths[i]}: frame size does not match intrinsics {k.width}x{k.height}")
        return c, d
