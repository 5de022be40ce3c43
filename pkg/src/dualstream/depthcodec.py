"""Depth colorization: metric depth <-> RGB frames that survive video transport.

A depth frame is mapped through a colormap lookup table (LUT) of ``lut_bins``
entries spanning ``[0, d_max]``. Decoding is nearest-entry search in RGB space
(squared L2), which makes it total and tolerant of small channel noise. Pixels
with no depth reading use a reserved ``invalid_color``.

Two range profiles are predefined: ``SELF_PROFILE`` (front camera, 0.8 m) and
``ENV_PROFILE`` (rear camera, 2 m). Both use the Turbo curve.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import logging
import threading
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from ._turbo import TURBO_SRGB
from .errors import CodecError, ConfigError, DuplicateEntryError, UncoverableAreaError
from .frames import ColorFrame, DepthFrame
from .geometry import Intrinsics

logger = logging.getLogger(__name__)

# LUT entries closer than this (sum of per-channel differences) to the invalid
# colour are left out of the usable set.
INVALID_SEPARATION = 32

_MEMO_UNKNOWN = -1


class Scheme(str, enum.Enum):
    TURBO_HUE = "turbo"
    LINEAR_GRAY = "gray"

    @classmethod
    def parse(cls, text: str) -> Scheme:
        key = text.strip().lower().replace("_", "").replace("-", "")
        aliases = {"turbo": cls.TURBO_HUE, "turbohue": cls.TURBO_HUE,
                   "gray": cls.LINEAR_GRAY, "lineargray": cls.LINEAR_GRAY, "grey": cls.LINEAR_GRAY}
        if key not in aliases:
            raise ConfigError(f"unknown colorization scheme {text!r}")
        return aliases[key]


@dataclass(frozen=True)
class ColorizationParams:
    scheme: Scheme = Scheme.TURBO_HUE
    d_max: float = 2.0
    lut_bins: int = 256
    invalid_color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "d_max", float(self.d_max))
        object.__setattr__(self, "invalid_color", tuple(int(c) for c in self.invalid_color))
        if not self.d_max > 0:
            raise ConfigError(f"d_max must be positive, got {self.d_max}")
        if not 2 <= self.lut_bins <= 32767:
            raise ConfigError(f"lut_bins must be in [2, 32767], got {self.lut_bins}")
        if len(self.invalid_color) != 3 or not all(0 <= c <= 255 for c in self.invalid_color):
            raise ConfigError(f"invalid_color must be an RGB triple, got {self.invalid_color}")

    def canonical(self) -> str:
        r, g, b = self.invalid_color
        return f"scheme={self.scheme.value};d_max_m={self.d_max!r};lut_bins={self.lut_bins};invalid_color={r},{g},{b}"

    def digest(self) -> bytes:
        """8-byte identifier carried in composite headers."""
        return hashlib.blake2b(self.canonical().encode("ascii"), digest_size=8).digest()

    def to_config(self) -> dict[str, str]:
        return {
            "scheme": self.scheme.value,
            "d_max_m": repr(self.d_max),
            "lut_bins": str(self.lut_bins),
            "invalid_color": ",".join(str(c) for c in self.invalid_color),
        }

    @classmethod
    def from_config(cls, cfg: dict[str, str], default: ColorizationParams | None = None) -> ColorizationParams:
        base = default or cls()
        known = {"scheme", "d_max_m", "lut_bins", "invalid_color"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown colorization keys: {sorted(extra)}")
        invalid = base.invalid_color
        if "invalid_color" in cfg:
            invalid = tuple(int(c) for c in cfgmod.parse_floats(cfg["invalid_color"], 3, "invalid_color"))
        return cls(
            scheme=Scheme.parse(cfg["scheme"]) if "scheme" in cfg else base.scheme,
            d_max=cfgmod.get_float(cfg, "d_max_m", base.d_max),
            lut_bins=cfgmod.get_int(cfg, "lut_bins", base.lut_bins),
            invalid_color=invalid,
        )


SELF_PROFILE = ColorizationParams(Scheme.TURBO_HUE, d_max=0.8)
ENV_PROFILE = ColorizationParams(Scheme.TURBO_HUE, d_max=2.0)

_profiles: dict[bytes, ColorizationParams] = {}


def register_profile(params: ColorizationParams) -> bytes:
    d = params.digest()
    _profiles[d] = params
    return d


def profile_for_digest(digest: bytes) -> ColorizationParams:
    try:
        return _profiles[bytes(digest)]
    except KeyError:
        raise CodecError(f"no colorization profile registered for digest {bytes(digest).hex()}") from None


register_profile(SELF_PROFILE)
register_profile(ENV_PROFILE)


def turbo(t) -> np.ndarray:
    """Turbo colormap at t in [0, 1] (linear interpolation of the 256-sample table), floats in [0, 1]."""
    table = np.asarray(TURBO_SRGB)
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    x = np.linspace(0.0, 1.0, len(table))
    return np.stack([np.interp(t, x, table[:, c]) for c in range(3)], axis=-1)


class ColorLUT:
    """Sampled colormap plus the derived encode/decode tables.

    Read-only after construction apart from the decode memo, which only ever
    transitions entries from unknown to their (unique) nearest-entry result.
    """

    def __init__(self, params: ColorizationParams, entries: np.ndarray):
        self.params = params
        self.entries = entries
        self.entries.setflags(write=False)
        n = len(entries)
        inv = np.asarray(params.invalid_color, dtype=np.int32)
        sep = np.abs(entries.astype(np.int32) - inv).sum(axis=1)
        self.usable = sep >= INVALID_SEPARATION
        if not self.usable.any():
            raise CodecError("every LUT entry collides with the invalid colour")
        if not self.usable.all():
            logger.debug("skipping %d LUT entries near invalid colour", int((~self.usable).sum()))
        # Bin -> nearest usable bin (identity when nothing is skipped).
        usable_idx = np.flatnonzero(self.usable)
        pos = np.searchsorted(usable_idx, np.arange(n))
        lo = usable_idx[np.clip(pos - 1, 0, len(usable_idx) - 1)]
        hi = usable_idx[np.clip(pos, 0, len(usable_idx) - 1)]
        here = np.arange(n)
        self._bin_remap = np.where(np.abs(hi - here) <= np.abs(here - lo), hi, lo)

        # decoded depth per bin (metres); slot n is the invalid colour
        self.centers = np.append(np.arange(n) / (n - 1) * params.d_max, 0.0)
        self.centers.setflags(write=False)

        # candidates for nearest-entry decode: usable entries first, invalid last,
        # so argmin's first-minimum rule resolves ties in favour of real entries
        self._cand_rgb = np.vstack([entries[usable_idx], inv[None, :]]).astype(np.int32)
        self._cand_slot = np.append(usable_idx, n).astype(np.int16)

        self._encode_table: np.ndarray | None = None
        self._memo: np.ndarray | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def bin_of_mm(self, mm: np.ndarray) -> np.ndarray:
        n = len(self.entries)
        b = np.rint(np.asarray(mm, dtype=np.float64) / 1000.0 / self.params.d_max * (n - 1))
        return self._bin_remap[np.clip(b, 0, n - 1).astype(np.intp)]

    @property
    def encode_table(self) -> np.ndarray:
        """RGB for every possible uint16 millimetre sample, shape (65536, 3)."""
        if self._encode_table is None:
            mm = np.arange(65536)
            tab = self.entries[self.bin_of_mm(mm)].copy()
            tab[0] = self.params.invalid_color
            tab.setflags(write=False)
            self._encode_table = tab
        return self._encode_table

    def _memo_table(self) -> np.ndarray:
        if self._memo is None:
            with self._lock:
                if self._memo is None:
                    self._memo = np.full(1 << 24, _MEMO_UNKNOWN, dtype=np.int16)
        return self._memo

    def nearest_slots(self, rgb: np.ndarray) -> np.ndarray:
        """Brute-force nearest candidate for each row of ``rgb`` (N, 3); returns slots."""
        rgb = np.asarray(rgb, dtype=np.int32)
        out = np.empty(len(rgb), dtype=np.int16)
        cand = self._cand_rgb
        step = max(1, 2_000_000 // len(cand))
        for s in range(0, len(rgb), step):
            chunk = rgb[s:s + step]
            d2 = ((chunk[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2)
            out[s:s + step] = self._cand_slot[np.argmin(d2, axis=1)]
        return out

    def decode_slots(self, pixels: np.ndarray) -> np.ndarray:
        """Per-pixel LUT slot (0..bins-1, or ``bins`` for invalid)."""
        memo = self._memo_table()
        key = pixels[..., 0].astype(np.int32)
        key <<= 8
        key |= pixels[..., 1]
        key <<= 8
        key |= pixels[..., 2]
        slots = np.take(memo, key)
        miss = slots == _MEMO_UNKNOWN
        if miss.any():
            new = np.unique(key[miss])
            rgb = np.stack([new >> 16, (new >> 8) & 0xFF, new & 0xFF], axis=1)
            memo[new] = self.nearest_slots(rgb)
            slots = np.take(memo, key)
        return slots


def _sample_entries(params: ColorizationParams) -> np.ndarray:
    n = params.lut_bins
    t = np.arange(n) / (n - 1)
    if params.scheme is Scheme.TURBO_HUE:
        return np.rint(turbo(t) * 255.0).astype(np.uint8)
    g = np.rint(255.0 * t).astype(np.uint8)
    return np.stack([g, g, g], axis=1)


@functools.lru_cache(maxsize=8)
def build_lut(params: ColorizationParams) -> ColorLUT:
    """Sample the colormap into ``lut_bins`` distinct RGB entries."""
    entries = _sample_entries(params)
    packed = (entries[:, 0].astype(np.int32) << 16) | (entries[:, 1].astype(np.int32) << 8) | entries[:, 2]
    uniq = np.unique(packed)
    if len(uniq) != len(packed):
        raise DuplicateEntryError(
            f"{params.scheme.value} colormap yields only {len(uniq)} distinct 8-bit colours "
            f"for {params.lut_bins} bins")
    return ColorLUT(params, entries)


def quantization_bound(params: ColorizationParams) -> float:
    """Worst-case clean-channel round-trip error in metres."""
    return params.d_max / (2 * (params.lut_bins - 1))


def min_entry_distance(params: ColorizationParams) -> float:
    """Smallest L2 distance between any two decode candidates (usable entries and invalid colour)."""
    lut = build_lut(params)
    c = lut._cand_rgb.astype(np.float64)
    d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def encode_depth(d: DepthFrame, params: ColorizationParams) -> ColorFrame:
    lut = build_lut(params)
    return ColorFrame(np.take(lut.encode_table, d.samples, axis=0))


def decode_bins(c: ColorFrame, params: ColorizationParams) -> np.ndarray:
    """Nearest LUT bin per pixel, -1 where the invalid colour wins."""
    lut = build_lut(params)
    slots = lut.decode_slots(c.pixels).astype(np.int32)
    slots[slots == len(lut)] = -1
    return slots


def decode_depth_m(c: ColorFrame, params: ColorizationParams) -> np.ndarray:
    """Exact metric decode: bin-centre depth in metres, 0.0 for invalid pixels."""
    lut = build_lut(params)
    return np.take(lut.centers, lut.decode_slots(c.pixels))


def decode_depth(c: ColorFrame, params: ColorizationParams) -> DepthFrame:
    """Decode to a millimetre DepthFrame.

    Storing in whole millimetres adds up to 0.5 mm on top of
    :func:`quantization_bound`; use :func:`decode_depth_m` when the exact bound
    matters.
    """
    return DepthFrame.from_meters(decode_depth_m(c, params))


def align_to_reference(src, src_k: Intrinsics, dst_k: Intrinsics):
    """Resample ``src`` so each output pixel sees the same ray as under ``dst_k``.

    Both cameras are assumed to share an optical centre, so this is a pure
    field-of-view crop. Depth uses nearest-neighbour sampling, colour bilinear.
    """
    is_depth = isinstance(src, DepthFrame)
    if not is_depth and not isinstance(src, ColorFrame):
        raise TypeError(f"expected DepthFrame or ColorFrame, got {type(src).__name__}")
    if (src.width, src.height) != (src_k.width, src_k.height):
        raise CodecError(f"frame is {src.width}x{src.height} but intrinsics say {src_k.width}x{src_k.height}")
    if src_k == dst_k:
        return type(src)((src.samples if is_depth else src.pixels).copy())

    us = src_k.cx + (np.arange(dst_k.width) - dst_k.cx) * (src_k.fx / dst_k.fx)
    vs = src_k.cy + (np.arange(dst_k.height) - dst_k.cy) * (src_k.fy / dst_k.fy)
    eps = 1e-9
    if (us[0] < -0.5 - eps or us[-1] > src_k.width - 0.5 + eps
            or vs[0] < -0.5 - eps or vs[-1] > src_k.height - 0.5 + eps):
        raise UncoverableAreaError(
            f"destination view spans source pixels u[{us[0]:.2f}, {us[-1]:.2f}] "
            f"v[{vs[0]:.2f}, {vs[-1]:.2f}], outside {src_k.width}x{src_k.height}")

    if is_depth:
        iu = np.clip(np.floor(us + 0.5).astype(np.intp), 0, src_k.width - 1)
        iv = np.clip(np.floor(vs + 0.5).astype(np.intp), 0, src_k.height - 1)
        return DepthFrame(src.samples[np.ix_(iv, iu)])

    img = src.pixels.astype(np.float64)

    def _axis(coords, size):
        c = np.clip(coords, 0, size - 1)
        i0 = np.clip(np.floor(c).astype(np.intp), 0, max(size - 2, 0))
        i1 = np.minimum(i0 + 1, size - 1)
        return i0, i1, c - i0

    u0, u1, fu = _axis(us, src_k.width)
    v0, v1, fv = _axis(vs, src_k.height)
    rows = img[v0] * (1 - fv)[:, None, None] + img[v1] * fv[:, None, None]
    out = rows[:, u0] * (1 - fu)[None, :, None] + rows[:, u1] * fu[None, :, None]
    return ColorFrame(np.clip(np.rint(out), 0, 255).astype(np.uint8))
