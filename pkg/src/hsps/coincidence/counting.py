"""Coincidence counting on sorted tag streams.

All delays are integer tick differences. A histogram bin ``k`` covers the
half-open tick interval ``[lo + k*w, lo + (k+1)*w)``; with an odd width
``w`` and ``lo = -K*w - w//2`` the bins are centred on multiples of ``w``
and the central bin is symmetric. A coincidence window of full width
``2*tau_coin`` is rounded to the nearest whole number of ticks, so the
lower edge is included and the upper edge excluded.

When one anchor has several partner tags inside a window, every partner is
counted (rate estimator). Heralds are counted per idler tag, so two idler
tags close together each open their own window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, ParameterError, UnsortedStreamError
from .kernels import get_kernels, BACKEND
from .tags import IDLER, SIGNAL1, SIGNAL2, TagStream


def window_ticks(tau_coin, resolution):
    """Full window width ``2*tau_coin`` rounded to whole ticks (at least 1)."""
    if not tau_coin > 0:
        raise ParameterError(f"tau_coin must be > 0, got {tau_coin!r}")
    return max(1, int(round(2.0 * tau_coin / resolution)))


def effective_tau_coin(tau_coin, resolution):
    """Half-width actually realised by :func:`window_ticks`."""
    return 0.5 * window_ticks(tau_coin, resolution) * resolution


def _bins(bin_ticks, range_, resolution):
    n_side = int(math.ceil(range_ / (bin_ticks * resolution) - 1e-9)) if range_ > 0 else 0
    lo = -n_side * bin_ticks - bin_ticks // 2
    return lo, 2 * n_side + 1


def _i64(ticks):
    ticks = np.ascontiguousarray(ticks, dtype=np.uint64)
    if len(ticks) and int(ticks[-1]) >= 2**63:
        raise DataError("tick values beyond 2**63 are not supported")
    return ticks.view(np.int64)


def _rates(counts, duration):
    if not duration > 0:
        raise DataError("stream duration must be > 0 to form rates")
    return {int(c): float(n) / duration for c, n in enumerate(counts)}


@dataclass
class CoincidenceHistogram:
    """Binned coincidence counts with enough metadata to normalise them.

    ``counts`` is 1-D for a delay histogram and 2-D for a triple surface
    (axis 0: first partner delay, axis 1: second partner delay).
    """

    counts: np.ndarray
    bin_ticks: int
    lo_ticks: int
    resolution: float
    duration: float
    channels: tuple
    singles: dict
    tau_coin: float = None
    meta: dict = field(default_factory=dict)

    @property
    def bin_width(self):
        return self.bin_ticks * self.resolution

    @property
    def centers(self):
        """Bin centres in seconds (the mean integer delay in each bin)."""
        n = self.counts.shape[0]
        k = np.arange(n)
        return (self.lo_ticks + k * self.bin_ticks + (self.bin_ticks - 1) / 2.0) * self.resolution

    @property
    def total(self):
        return int(self.counts.sum())

    def g2(self):
        """Normalised ḡ(τ) and its Poisson error for a 1-D histogram.

        ``counts / (rate_A * rate_B * duration * bin_width)``; empty bins get
        the one-count error.
        """
        if self.counts.ndim != 1:
            raise DataError("g2() needs a 1-D histogram")
        ra, rb = (self.singles[c] for c in self.channels)
        if ra <= 0 or rb <= 0:
            raise DataError("a channel has no singles; cannot normalise")
        norm = ra * rb * self.duration * self.bin_width
        c = self.counts.astype(float)
        return c / norm, np.sqrt(np.maximum(c, 1.0)) / norm

    def to_csv(self, path, header=()):
        lines = [f"# {h}" for h in header]
        lines += [
            f"# channels={','.join(str(c) for c in self.channels)}",
            f"# resolution_s={self.resolution!r}",
            f"# bin_ticks={self.bin_ticks}",
            f"# duration_s={self.duration!r}",
            f"# tau_coin_s={self.tau_coin!r}",
        ]
        lines += [f"# singles_rate_ch{c}={r!r}" for c, r in sorted(self.singles.items())]
        x = self.centers
        if self.counts.ndim == 1:
            g, s = self.g2()
            lines.append("tau_s,counts,g2,sigma")
            lines += [f"{a!r},{int(n)},{v!r},{e!r}" for a, n, v, e in zip(x, self.counts, g, s)]
        else:
            lines.append("tau1_s,tau2_s,counts")
            for i, a in enumerate(x):
                lines += [f"{a!r},{b!r},{int(n)}" for b, n in zip(x, self.counts[i])]
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


@dataclass
class G2cProfile:
    """Heralded ḡ_c(τ) from counts: ``triples * N_i / (N_is1(0) * N_is2(τ))``."""

    tau: np.ndarray
    value: np.ndarray
    sigma: np.ndarray
    triples: np.ndarray
    pairs_s2: np.ndarray
    pairs_s1_zero: int
    heralds: int
    tau_coin: float

    @property
    def at_zero(self):
        k = int(np.argmin(np.abs(self.tau)))
        return float(self.value[k]), float(self.sigma[k])

    def to_csv(self, path, header=()):
        lines = [f"# {h}" for h in header]
        lines += [f"# tau_coin_s={self.tau_coin!r}", f"# heralds={self.heralds}",
                  f"# pairs_s1_zero={self.pairs_s1_zero}", "tau_s,g2c,sigma,triples,pairs_s2"]
        lines += [f"{t!r},{v!r},{s!r},{int(a)},{int(b)}"
                  for t, v, s, a, b in zip(self.tau, self.value, self.sigma, self.triples, self.pairs_s2)]
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def g2c_from_counts(tau, triples, pairs_s2, pairs_s1_zero, heralds, tau_coin):
    """Empirical ḡ_c(τ) with first-order Poisson error propagation."""
    triples = np.asarray(triples, dtype=float)
    pairs_s2 = np.asarray(pairs_s2, dtype=float)
    if heralds <= 0:
        raise DataError("no idler tags: cannot herald")
    if pairs_s1_zero <= 0:
        raise DataError("no idler-s1 coincidences at zero delay (N_si(0) = 0)")
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = heralds / (pairs_s1_zero * pairs_s2)
        value = np.where(pairs_s2 > 0, triples * scale, np.nan)
        rel2 = 1.0 / np.maximum(triples, 1.0) + 1.0 / heralds + 1.0 / pairs_s1_zero + 1.0 / np.maximum(pairs_s2, 1.0)
        sigma = np.where(pairs_s2 > 0, np.maximum(triples, 1.0) * scale * np.sqrt(rel2), np.nan)
    return G2cProfile(np.asarray(tau, float), value, sigma, triples.astype(np.int64),
                      pairs_s2.astype(np.int64), int(pairs_s1_zero), int(heralds), float(tau_coin))


def singles(stream: TagStream):
    """Count rate per channel in 1/s."""
    if not stream.duration > 0:
        raise DataError("stream duration must be > 0 to form rates")
    return _rates(stream.counts_per_channel(), stream.duration)


def delay_histogram(stream: TagStream, ch_a, ch_b, bin_width, range_, *, backend=None, blocks=1):
    """Histogram of ``t_B - t_A`` over every A tag, for delays up to ``range_``.

    ``bin_width`` is rounded to whole ticks and must be at least one tick.
    ``blocks`` splits the anchors into that many index blocks; the result is
    identical for any value (used to exercise the sharding contract).
    """
    if bin_width < stream.resolution * (1 - 1e-9):
        raise ParameterError("bin_width must be at least one tag resolution")
    stream.require_sorted()
    k = get_kernels(backend)
    w = max(1, int(round(bin_width / stream.resolution)))
    lo, nb = _bins(w, range_, stream.resolution)
    out = np.zeros(nb, dtype=np.int64)
    t = _i64(stream.ticks)
    edges = np.linspace(0, len(t), blocks + 1).astype(int)
    for a, b in zip(edges[:-1], edges[1:]):
        k.delay_hist(stream.channel, t, int(ch_a), int(ch_b), lo, w, out, int(a), int(b))
    return CoincidenceHistogram(out, w, lo, stream.resolution, stream.duration, (int(ch_a), int(ch_b)),
                                singles(stream), None)


@dataclass
class CountResult:
    """Everything the streaming counter accumulates for a heralded HBT run."""

    resolution: float
    duration: float
    counts: np.ndarray
    bin_ticks: int
    lo_ticks: int
    hist_is1: np.ndarray
    hist_is2: np.ndarray
    surface: np.ndarray
    channels: tuple = (IDLER, SIGNAL1, SIGNAL2)
    backend: str = BACKEND

    @property
    def tau_coin(self):
        return 0.5 * self.bin_ticks * self.resolution

    @property
    def n_side(self):
        return (self.hist_is1.shape[0] - 1) // 2

    def singles(self):
        return _rates(self.counts, self.duration)

    def _hist(self, counts, chans):
        return CoincidenceHistogram(counts, self.bin_ticks, self.lo_ticks, self.resolution, self.duration,
                                    chans, self.singles(), self.tau_coin)

    def histogram(self, arm):
        """Idler-signal delay histogram for ``arm`` 1 or 2, binned at the window width."""
        i, s1, s2 = self.channels
        return self._hist(self.hist_is1 if arm == 1 else self.hist_is2, (i, s1 if arm == 1 else s2))

    def surface_histogram(self):
        if self.surface.shape[0] != self.surface.shape[1]:
            raise DataError("only the zero-delay row of the surface was accumulated")
        return self._hist(self.surface, self.channels)

    def g2c_profile(self):
        k0 = self.n_side
        row = self.surface[k0] if self.surface.shape[0] > 1 else self.surface[0]
        tau = self._hist(self.hist_is2, self.channels[::2]).centers
        return g2c_from_counts(tau, row, self.hist_is2, int(self.hist_is1[k0]),
                               int(self.counts[self.channels[0]]), self.tau_coin)

    def to_dict(self):
        return {"resolution": self.resolution, "duration": self.duration, "counts": self.counts.tolist(),
                "bin_ticks": self.bin_ticks, "lo_ticks": self.lo_ticks, "hist_is1": self.hist_is1.tolist(),
                "hist_is2": self.hist_is2.tolist(), "surface": self.surface.tolist(),
                "channels": list(self.channels), "backend": self.backend}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["resolution"]), float(d["duration"]), np.asarray(d["counts"], np.int64),
                   int(d["bin_ticks"]), int(d["lo_ticks"]), np.asarray(d["hist_is1"], np.int64),
                   np.asarray(d["hist_is2"], np.int64), np.asarray(d["surface"], np.int64).reshape(
                       -1, len(d["hist_is2"])), tuple(d["channels"]), d.get("backend", BACKEND))

    def merge(self, other):
        """Combine counts from disjoint time blocks of one acquisition."""
        if (self.bin_ticks, self.lo_ticks, self.resolution) != (other.bin_ticks, other.lo_ticks, other.resolution):
            raise DataError("cannot merge count results with different binning")
        return CountResult(self.resolution, self.duration + other.duration, self.counts + other.counts,
                           self.bin_ticks, self.lo_ticks, self.hist_is1 + other.hist_is1,
                           self.hist_is2 + other.hist_is2, self.surface + other.surface, self.channels,
                           self.backend)


class StreamCounter:
    """Exact single-pass counter fed with consecutive sorted chunks.

    Idler tags are processed as anchors once every partner that could fall in
    their window has arrived; tags still needed by pending anchors are kept as
    a halo. Memory is the chunk size plus the window occupancy, and results
    equal a one-shot count of the concatenated stream bit for bit.
    """

    def __init__(self, resolution, tau_coin, range_, *, channels=(IDLER, SIGNAL1, SIGNAL2), n_channels=3,
                 full_surface=True, backend=None):
        self.resolution = float(resolution)
        self.channels = tuple(int(c) for c in channels)
        self.kernels = get_kernels(backend)
        self.backend = backend or BACKEND
        self.w = window_ticks(tau_coin, resolution)
        self.lo, nb = _bins(self.w, range_, resolution)
        self.hi = self.lo + nb * self.w
        self.nb = nb
        self.hist_is1 = np.zeros(nb, np.int64)
        self.hist_is2 = np.zeros(nb, np.int64)
        if full_surface:
            self.surface = np.zeros((nb, nb), np.int64)
            self._slo = self.lo
        else:
            self.surface = np.zeros((1, nb), np.int64)
            self._slo = -(self.w // 2)
        self.counts = np.zeros(n_channels, np.int64)
        self._ch = np.zeros(0, np.uint8)
        self._t = np.zeros(0, np.int64)
        self._pending = 0
        self._last = None

    def _process(self, a_stop):
        a_start = self._pending
        if a_stop > a_start:
            i, s1, s2 = self.channels
            k, ch, t = self.kernels, self._ch, self._t
            k.delay_hist(ch, t, i, s1, self.lo, self.w, self.hist_is1, a_start, a_stop)
            k.delay_hist(ch, t, i, s2, self.lo, self.w, self.hist_is2, a_start, a_stop)
            k.triple_hist(ch, t, i, s1, s2, self._slo, self.w, self.lo, self.w, self.surface, a_start, a_stop)
        self._pending = max(a_stop, a_start)

    def feed(self, channel, ticks):
        channel = np.ascontiguousarray(channel, dtype=np.uint8)
        t = _i64(ticks)
        if len(t) == 0:
            return
        if not self.kernels.is_sorted(t) or (self._last is not None and t[0] < self._last):
            raise UnsortedStreamError("chunk is not sorted or overlaps the previous chunk")
        self._last = int(t[-1])
        self.counts += np.bincount(channel, minlength=len(self.counts))[: len(self.counts)]
        self._ch = np.concatenate([self._ch, channel])
        self._t = np.concatenate([self._t, t])
        a_stop = int(np.searchsorted(self._t, self._last - self.hi + 1, side="left"))
        self._process(a_stop)
        # Drop tags no pending anchor can reach.
        ref = self._t[self._pending] if self._pending < len(self._t) else self._t[-1]
        keep = int(np.searchsorted(self._t, ref + self.lo, side="left"))
        if keep:
            self._ch = self._ch[keep:]
            self._t = self._t[keep:]
            self._pending -= keep

    def finish(self, duration) -> CountResult:
        self._process(len(self._t))
        return CountResult(self.resolution, float(duration), self.counts.copy(), self.w, self.lo,
                           self.hist_is1.copy(), self.hist_is2.copy(), self.surface.copy(), self.channels,
                           self.backend)


def count_stream(stream: TagStream, tau_coin, range_, *, full_surface=True, backend=None,
                 chunk_tags=None, channels=(IDLER, SIGNAL1, SIGNAL2)) -> CountResult:
    """Run :class:`StreamCounter` over an in-memory stream."""
    stream.require_sorted()
    ctr = StreamCounter(stream.resolution, tau_coin, range_, channels=channels, n_channels=stream.n_channels,
                        full_surface=full_surface, backend=backend)
    n = len(stream)
    step = n if not chunk_tags else int(chunk_tags)
    for a in range(0, n, max(step, 1)):
        ctr.feed(stream.channel[a:a + step], stream.ticks[a:a + step])
    return ctr.finish(stream.duration)


def triple_surface(stream: TagStream, tau_coin, range_, *, backend=None, channels=(IDLER, SIGNAL1, SIGNAL2)):
    """2-D histogram over (t_s1 - t_i, t_s2 - t_i) with bins one window wide."""
    return count_stream(stream, tau_coin, range_, backend=backend, channels=channels).surface_histogram()


def g2c_profile(stream: TagStream, tau_coin, range_, *, backend=None, channels=(IDLER, SIGNAL1, SIGNAL2)):
    """Heralded ḡ_c(τ) at window-width spacing, with s1 held in the zero-delay window."""
    res = count_stream(stream, tau_coin, range_, full_surface=False, backend=backend, channels=channels)
    return res.g2c_profile()


def peak_wall(surface: CoincidenceHistogram, exclude=3):
    """Peak (origin bin) and mean wall height of a triple surface.

    The wall is the row and column through zero delay, skipping ``exclude``
    bins either side of the origin. Returns ``(peak, wall, ratio, ratio_sigma)``.
    """
    c = surface.counts
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DataError("peak_wall needs a square 2-D surface")
    k0 = c.shape[0] // 2
    far = np.abs(np.arange(c.shape[0]) - k0) > exclude
    if not far.any():
        raise DataError("surface range too small to reach the wall")
    wall_bins = np.concatenate([c[k0, far], c[far, k0]]).astype(float)
    peak = float(c[k0, k0])
    wall = float(wall_bins.mean())
    if wall <= 0:
        raise DataError("empty wall; not enough triples")
    ratio = peak / wall
    rel = math.sqrt(1.0 / max(peak, 1.0) + 1.0 / max(wall_bins.sum(), 1.0))
    return peak, wall, ratio, ratio * rel
