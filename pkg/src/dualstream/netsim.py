"""Deterministic two-channel transport model and video-style degradation.

Randomness is counter-based: the draw for the n-th payload on a link depends
only on ``(seed, link key, n)``, so reruns with the same seeds reproduce every
drop and delay exactly.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import config as cfgmod
from .composite import CompositeFrame
from .errors import ConfigError


def _stream_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class LinkModel:
    base_latency_ms: float = 0.0
    jitter_ms: float = 0.0  # uniform in [-jitter, +jitter]
    loss_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.base_latency_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("latency and jitter must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigError(f"loss_prob must be in [0, 1], got {self.loss_prob}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @classmethod
    def from_config(cls, cfg: dict[str, str], default: LinkModel | None = None) -> LinkModel:
        base = default or cls()
        extra = set(cfg) - {"latency_ms", "jitter_ms", "loss", "seed"}
        if extra:
            raise ConfigError(f"unknown link keys: {sorted(extra)}")
        return cls(
            base_latency_ms=cfgmod.get_float(cfg, "latency_ms", base.base_latency_ms),
            jitter_ms=cfgmod.get_float(cfg, "jitter_ms", base.jitter_ms),
            loss_prob=cfgmod.get_float(cfg, "loss", base.loss_prob),
            seed=cfgmod.get_int(cfg, "seed", base.seed),
        )


class Link:
    """One FIFO transport path (e.g. sender -> relay -> one receiver).

    Delivery times are clamped to be non-decreasing so undropped payloads
    never overtake each other.
    """

    def __init__(self, model: LinkModel, name: str = ""):
        self.model = model
        self.name = name
        self._key = _stream_key(name)
        self._count = 0
        self._last_event: int | None = None
        self._last_delivery: int | None = None

    def draws(self, n: int) -> tuple[float, float]:
        u = np.random.default_rng([self.model.seed, self._key, n]).random(2)
        return float(u[0]), float(u[1])

    def _check_clock(self, event_time_us: int) -> None:
        if self._last_event is not None and event_time_us < self._last_event:
            raise ValueError(f"event clock went backwards on link {self.name!r}")
        self._last_event = event_time_us

    def _attempt(self, send_time_us: int) -> int | None:
        n = self._count
        self._count += 1
        u_loss, u_jitter = self.draws(n)
        m = self.model
        if u_loss < m.loss_prob:
            return None
        delay_ms = m.base_latency_ms + (2.0 * u_jitter - 1.0) * m.jitter_ms
        t = send_time_us + int(round(max(delay_ms, 0.0) * 1000.0))
        if self._last_delivery is not None and t < self._last_delivery:
            t = self._last_delivery
        self._last_delivery = t
        return t

    def schedule(self, event_time_us: int, payload: Any = None) -> int | None:
        """Delivery time in microseconds, or None if the payload is lost."""
        self._check_clock(event_time_us)
        return self._attempt(event_time_us)

    def schedule_reliable(self, event_time_us: int, rto_us: int, max_attempts: int = 10_000) -> int:
        """Like :meth:`schedule`, but lost copies are resent every ``rto_us``.

        Later payloads queue behind a retransmission, as on an ordered
        reliable stream.
        """
        self._check_clock(event_time_us)
        for attempt in range(max_attempts):
            t = self._attempt(event_time_us + attempt * rto_us)
            if t is not None:
                return t
        raise ConfigError(f"link {self.name!r} lost {max_attempts} consecutive retransmissions")


def schedule(event_time_us: int, payload: Any, link: Link) -> int | None:
    return link.schedule(event_time_us, payload)


@dataclass(frozen=True)
class DegradationModel:
    chroma_subsample: str | None = None  # None or "4:2:0"
    noise_sigma: float = 0.0
    quant_step: int = 1

    def __post_init__(self):
        if self.chroma_subsample not in (None, "4:2:0"):
            raise ConfigError(f"chroma_subsample must be None or '4:2:0', got {self.chroma_subsample!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.quant_step < 1:
            raise ConfigError("quant_step must be >= 1")

    @property
    def is_identity(self) -> bool:
        return self.chroma_subsample is None and self.noise_sigma == 0 and self.quant_step == 1

    @classmethod
    def from_config(cls, cfg: dict[str, str], default: DegradationModel | None = None) -> DegradationModel:
        base = default or cls()
        extra = set(cfg) - {"subsample", "sigma", "quant"}
        if extra:
            raise ConfigError(f"unknown degradation keys: {sorted(extra)}")
        sub = cfg.get("subsample", base.chroma_subsample or "none")
        return cls(
            chroma_subsample=None if str(sub).lower() in ("none", "") else sub,
            noise_sigma=cfgmod.get_float(cfg, "sigma", base.noise_sigma),
            quant_step=cfgmod.get_int(cfg, "quant", base.quant_step),
        )


# BT.601 full-range RGB -> YCbCr
_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def subsample_420(rgb: np.ndarray) -> np.ndarray:
    """Average chroma over 2x2 blocks; float RGB in, float RGB out."""
    ycc = rgb @ _RGB2YCC.T
    h, w = ycc.shape[:2]
    ph, pw = h + (h & 1), w + (w & 1)
    chroma = np.pad(ycc[..., 1:], ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    avg = chroma.reshape(ph // 2, 2, pw // 2, 2, 2).mean(axis=(1, 3))
    ycc[..., 1:] = np.repeat(np.repeat(avg, 2, axis=0), 2, axis=1)[:h, :w]
    return ycc @ _YCC2RGB.T


def degrade_pixels(pixels: np.ndarray, m: DegradationModel, seed: int) -> np.ndarray:
    if m.is_identity:
        return pixels.copy()
    x = pixels.astype(np.float64)
    if m.chroma_subsample == "4:2:0":
        x = subsample_420(x)
    if m.quant_step > 1:
        x = np.rint(x / m.quant_step) * m.quant_step
    if m.noise_sigma > 0:
        x = x + np.random.default_rng(seed).normal(0.0, m.noise_sigma, size=x.shape)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def degrade(f: CompositeFrame, m: DegradationModel, seed: int) -> CompositeFrame:
    """Pass payload pixels through subsampling, quantization and noise; metadata untouched."""
    out = degrade_pixels(f.payload, m, seed)
    out.setflags(write=False)
    return replace(f, payload=out)


# --- discrete-event core ---------------------------------------------------

class EventQueue:
    """Min-heap of (time_us, insertion order) -> event; ties pop in insertion order."""

    def __init__(self):
        self._heap: list = []
        self._counter = itertools.count()

    def push(self, time_us: int, event: Any) -> None:
        heapq.heappush(self._heap, (time_us, next(self._counter), event))

    def pop(self) -> tuple[int, Any]:
        t, _, ev = heapq.heappop(self._heap)
        return t, ev

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class EventLog:
    """Line-delimited records: ``time_us channel event size key=value...``."""

    records: list[tuple[int, str, str, int, dict[str, Any]]] = field(default_factory=list)

    def add(self, time_us: int, channel: str, event: str, size: int = 0, **extra) -> None:
        self.records.append((time_us, channel, event, size, extra))

    def lines(self) -> list[str]:
        out = []
        for t, ch, ev, size, extra in self.records:
            kv = " ".join(f"{k}={_fmt(v)}" for k, v in extra.items())
            out.append(f"{t} {ch} {ev} {size}" + (f" {kv}" if kv else ""))
        return out

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    @staticmethod
    def parse(text: str) -> list[tuple[int, str, str, int, dict[str, str]]]:
        recs = []
        for line in text.splitlines():
            if not line.strip():
                continue
            parts = line.split()
            extra = dict(p.split("=", 1) for p in parts[4:])
            recs.append((int(parts[0]), parts[1], parts[2], int(parts[3]), extra))
        return recs


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
