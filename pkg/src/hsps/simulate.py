"""Monte-Carlo time-tag generator for a heralded HBT measurement.

Pairs are emitted as a homogeneous Poisson process. For each pair the signal
is offset from the idler by a uniform delay on ``[-1/(2B), 1/(2B)]``, which
reproduces the rectangular cross-correlation envelope. Each photon then goes
through detector loss, beam-splitter routing (signal only), uniform timing
jitter, floor quantisation to the tag grid and finally per-channel
non-paralyzable dead time.

Thermal bunching between different pairs is not generated: its correlation
time 1/B is far below the tag resolution and its weight in windowed counts is
of order 1/(B * tau_coin).

Randomness uses numpy's PCG64. The run is cut into fixed shards; shard ``k``
draws from ``SeedSequence(rng_seed, spawn_key=(k,))``, so the output depends
only on the config and not on how many worker threads produce the shards.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coincidence.kernels import get_kernels
from .coincidence.tags import IDLER, SIGNAL1, SIGNAL2, TagStream, CHANNEL_NAMES
from .errors import ParameterError, TagBudgetError
from .model import SpdcParams
from .response import DetectorModel

RNG_ALGORITHM = "PCG64 (numpy), SeedSequence(rng_seed, spawn_key=(shard,))"
DEFAULT_TAG_BUDGET = 50_000_000
_PAIRS_PER_SHARD = 500_000


def _channel_key(key):
    if isinstance(key, str):
        if key not in CHANNEL_NAMES:
            raise ParameterError(f"unknown channel {key!r}; use one of {sorted(CHANNEL_NAMES)}")
        return CHANNEL_NAMES[key]
    return int(key)


@dataclass
class SimConfig:
    """Source, three detectors (idler, s1, s2), splitter and run length."""

    source: SpdcParams
    detectors: dict = field(default_factory=lambda: {c: DetectorModel() for c in (IDLER, SIGNAL1, SIGNAL2)})
    splitter_ratio: float = 0.5
    duration: float = 1.0
    rng_seed: int = 0
    shard_duration: float = None

    def __post_init__(self):
        dets = {_channel_key(k): v for k, v in dict(self.detectors).items()}
        missing = {IDLER, SIGNAL1, SIGNAL2} - set(dets)
        if missing:
            raise ParameterError(f"missing detector for channel(s) {sorted(missing)}")
        self.detectors = {c: dets[c] for c in (IDLER, SIGNAL1, SIGNAL2)}
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ParameterError(f"duration must be > 0, got {self.duration!r}")
        if not 0.0 <= self.splitter_ratio <= 1.0:
            raise ParameterError(f"splitter_ratio must lie in [0, 1], got {self.splitter_ratio!r}")
        res = {d.tag_resolution for d in self.detectors.values()}
        if len(res) != 1:
            raise ParameterError("all channels must share one tag_resolution")
        if not (isinstance(self.rng_seed, (int, np.integer)) and 0 <= int(self.rng_seed) < 2**64):
            raise ParameterError("rng_seed must be an integer in [0, 2**64)")
        if self.shard_duration is None:
            self.shard_duration = min(self.duration, _PAIRS_PER_SHARD / self.source.pair_rate)
        if not self.shard_duration > 0:
            raise ParameterError("shard_duration must be > 0")

    @property
    def resolution(self):
        return self.detectors[IDLER].tag_resolution

    @property
    def n_shards(self):
        return int(math.ceil(self.duration / self.shard_duration - 1e-12))

    def expected_tags(self):
        """Mean number of tags before dead-time losses."""
        d = self.detectors
        per_pair = d[IDLER].efficiency + self.splitter_ratio * d[SIGNAL1].efficiency \
            + (1.0 - self.splitter_ratio) * d[SIGNAL2].efficiency
        return self.source.pair_rate * self.duration * per_pair


def _dead_ticks(cfg):
    res = cfg.resolution
    return np.array([int(math.ceil(cfg.detectors[c].dead_time / res - 1e-9)) for c in (IDLER, SIGNAL1, SIGNAL2)],
                    dtype=np.int64)


def _shard_keys(cfg: SimConfig, k: int):
    """Sorted tag keys ``ticks*4 + channel`` from the pairs emitted in shard ``k``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(cfg.rng_seed), spawn_key=(k,))))
    start = k * cfg.shard_duration
    length = min(cfg.shard_duration, cfg.duration - start)
    p, d, res = cfg.source, cfg.detectors, cfg.resolution
    n = rng.poisson(p.pair_rate * length)
    t_pair = start + rng.uniform(0.0, length, n)

    idler_ok = rng.random(n) < d[IDLER].efficiency
    fate = rng.random(n)
    a1 = cfg.splitter_ratio * d[SIGNAL1].efficiency
    a2 = a1 + (1.0 - cfg.splitter_ratio) * d[SIGNAL2].efficiency
    to_s1 = fate < a1
    to_s2 = (fate >= a1) & (fate < a2)
    sig = to_s1 | to_s2

    half = 0.5 / p.bandwidth
    t_i = t_pair[idler_ok]
    t_s = t_pair[sig] + rng.uniform(-half, half, int(sig.sum()))
    ch_s = np.where(to_s1[sig], SIGNAL1, SIGNAL2).astype(np.int64)

    tau_i = d[IDLER].jitter
    if tau_i > 0:
        t_i = t_i + rng.uniform(-tau_i, tau_i, len(t_i))
    jit_s = np.where(ch_s == SIGNAL1, d[SIGNAL1].jitter, d[SIGNAL2].jitter)
    if np.any(jit_s > 0):
        t_s = t_s + jit_s * rng.uniform(-1.0, 1.0, len(t_s))

    times = np.concatenate([t_i, t_s])
    chans = np.concatenate([np.full(len(t_i), IDLER, np.int64), ch_s])
    ok = (times >= 0.0) & (times < cfg.duration)
    ticks = np.floor(times[ok] / res).astype(np.int64)
    return np.sort(ticks * 4 + chans[ok])


def iter_generate(cfg: SimConfig, *, workers=1, backend=None):
    """Yield consecutive sorted ``(channel, ticks)`` chunks of the full run.

    Memory is bounded by a few shards regardless of ``duration``.
    """
    res = cfg.resolution
    max_jitter = max(det.jitter for det in cfg.detectors.values())
    margin = int(math.ceil((max_jitter + 0.5 / cfg.source.bandwidth) / res)) + 2
    dead = _dead_ticks(cfg)
    last = np.full(3, -(2**62), dtype=np.int64)
    kernels = get_kernels(backend)
    carry = np.zeros(0, np.int64)

    def emit(keys):
        ticks = np.ascontiguousarray(keys >> 2)
        ch = np.ascontiguousarray((keys & 3).astype(np.uint8))
        keep = np.empty(len(ticks), np.uint8)
        kernels.deadtime_mask(ch, ticks, dead, last, keep)
        keep = keep.view(bool)
        return ch[keep], ticks[keep].view(np.uint64)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        shards = range(cfg.n_shards)
        results = pool.map(lambda k: _shard_keys(cfg, k), shards) if pool else (_shard_keys(cfg, k) for k in shards)
        for k, keys in enumerate(results):
            merged = np.concatenate([carry, keys]) if len(carry) else keys
            if len(carry):
                merged.sort(kind="mergesort")
            end = min((k + 1) * cfg.shard_duration, cfg.duration)
            cut = (int(math.floor(end / res)) - margin) * 4
            split = int(np.searchsorted(merged, cut, side="left")) if k + 1 < cfg.n_shards else len(merged)
            carry = merged[split:]
            if split:
                yield emit(merged[:split])
    finally:
        if pool:
            pool.shutdown()


def generate(cfg: SimConfig, *, max_tags=DEFAULT_TAG_BUDGET, workers=1, backend=None) -> TagStream:
    """Generate the whole run in memory as a :class:`TagStream`."""
    expected = cfg.expected_tags()
    if expected > max_tags:
        raise TagBudgetError(int(expected), int(max_tags))
    chunks = list(iter_generate(cfg, workers=workers, backend=backend))
    if chunks:
        ch = np.concatenate([c for c, _ in chunks])
        tk = np.concatenate([t for _, t in chunks])
    else:
        ch, tk = np.zeros(0, np.uint8), np.zeros(0, np.uint64)
    return TagStream(ch, tk, cfg.resolution, 3, cfg.duration, {"rng_seed": int(cfg.rng_seed)})


def inject_background(stream: TagStream, rate, *, seed=0, channels=None) -> TagStream:
    """Add independent Poisson tags at ``rate`` per second to each channel.

    Dead time is not re-applied to the added tags.
    """
    if rate < 0:
        raise ParameterError(f"background rate must be >= 0, got {rate!r}")
    if rate == 0:
        return stream
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(2**31,))))
    channels = range(stream.n_channels) if channels is None else [_channel_key(c) for c in channels]
    n_ticks = max(1, int(math.floor(stream.duration / stream.resolution)))
    keys = [stream.ticks.astype(np.int64) * 4 + stream.channel]
    for c in channels:
        n = rng.poisson(rate * stream.duration)
        keys.append(rng.integers(0, n_ticks, n, dtype=np.int64) * 4 + c)
    merged = np.sort(np.concatenate(keys), kind="stable")
    return TagStream((merged & 3).astype(np.uint8), (merged >> 2).astype(np.uint64), stream.resolution,
                     stream.n_channels, stream.duration, dict(stream.meta))
