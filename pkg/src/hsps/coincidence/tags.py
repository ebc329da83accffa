"""Time-tag streams and their on-disk formats.

A stream is two parallel arrays: ``channel`` (uint8; 0 = idler, 1 = s1,
2 = s2) and ``ticks`` (uint64 counts of ``resolution`` seconds), globally
sorted by ticks.

Binary layout (little endian)::

    header  : b"HTAG", u32 version=1, u64 resolution_fs, u8 n_channels, u64 n_tags
    records : n_tags x {u8 channel, u64 ticks}   (9 bytes, packed)

The binary header carries no duration; readers infer it as
``(last_tick + 1) * resolution`` unless the caller supplies one. The text
format is CSV ``channel,ticks`` preceded by ``#`` comment lines, of which
``# resolution_fs=...``, ``# n_channels=...`` and ``# duration_s=...`` are
understood on read.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, UnsortedStreamError

MAGIC = b"HTAG"
VERSION = 1
_HEADER = struct.Struct("<4sIQBQ")
RECORD_DTYPE = np.dtype([("channel", "<u1"), ("ticks", "<u8")])  # packed, 9 bytes

IDLER, SIGNAL1, SIGNAL2 = 0, 1, 2
CHANNEL_NAMES = {"i": IDLER, "s1": SIGNAL1, "s2": SIGNAL2}


def _fs(resolution):
    fs = int(round(resolution * 1e15))
    if fs <= 0:
        raise DataError(f"tag resolution must be > 0, got {resolution!r}")
    return fs


@dataclass
class TagStream:
    """Sorted multi-channel time tags.

    ``duration`` is the observation time in seconds used to turn counts into
    rates. It defaults to ``(last tick + 1) * resolution``.
    """

    channel: np.ndarray
    ticks: np.ndarray
    resolution: float = 156.25e-12
    n_channels: int = 3
    duration: float = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channel = np.ascontiguousarray(self.channel, dtype=np.uint8)
        self.ticks = np.ascontiguousarray(self.ticks, dtype=np.uint64)
        if self.channel.shape != self.ticks.shape or self.channel.ndim != 1:
            raise DataError("channel and ticks must be 1-D arrays of equal length")
        if not self.resolution > 0:
            raise DataError(f"tag resolution must be > 0, got {self.resolution!r}")
        if len(self.channel) and int(self.channel.max()) >= self.n_channels:
            raise DataError(f"channel code {int(self.channel.max())} >= n_channels={self.n_channels}")
        if self.duration is None:
            self.duration = (int(self.ticks[-1]) + 1) * self.resolution if len(self.ticks) else 0.0

    def __len__(self):
        return len(self.ticks)

    @classmethod
    def empty(cls, resolution=156.25e-12, n_channels=3, duration=0.0):
        return cls(np.zeros(0, np.uint8), np.zeros(0, np.uint64), resolution, n_channels, duration)

    @property
    def times(self):
        """Timestamps in seconds."""
        return self.ticks.astype(float) * self.resolution

    def is_sorted(self):
        from .kernels import get_kernels
        return bool(get_kernels().is_sorted(self.ticks.view(np.int64)))

    def require_sorted(self):
        if not self.is_sorted():
            raise UnsortedStreamError("tag stream is not sorted by time; sort it explicitly before counting")

    def counts_per_channel(self):
        return np.bincount(self.channel, minlength=self.n_channels)[: self.n_channels]

    def select(self, channels):
        keep = np.isin(self.channel, np.asarray(channels, dtype=np.uint8))
        return TagStream(self.channel[keep], self.ticks[keep], self.resolution, self.n_channels,
                         self.duration, dict(self.meta))

    def sorted(self):
        """Return a time-sorted copy (stable, ties ordered by channel)."""
        order = np.lexsort((self.channel, self.ticks))
        return TagStream(self.channel[order], self.ticks[order], self.resolution, self.n_channels,
                         self.duration, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (self.resolution == other.resolution and self.n_channels == other.n_channels
                and np.array_equal(self.channel, other.channel)
                and np.array_equal(self.ticks, other.ticks))


def concatenate(streams, duration=None):
    """Join consecutive, non-overlapping sorted streams into one."""
    streams = list(streams)
    if not streams:
        raise DataError("nothing to concatenate")
    res = streams[0].resolution
    if any(s.resolution != res for s in streams):
        raise DataError("streams have different tag resolutions")
    ch = np.concatenate([s.channel for s in streams])
    tk = np.concatenate([s.ticks for s in streams])
    if duration is None:
        duration = max(s.duration for s in streams)
    return TagStream(ch, tk, res, max(s.n_channels for s in streams), duration)


# -- binary -----------------------------------------------------------------

def write_binary(stream: TagStream, path):
    rec = np.empty(len(stream), dtype=RECORD_DTYPE)
    rec["channel"] = stream.channel
    rec["ticks"] = stream.ticks
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, _fs(stream.resolution), stream.n_channels, len(stream)))
        rec.tofile(fh)


class BinaryTagWriter:
    """Append sorted chunks to a binary tag file; the tag count is patched on close."""

    def __init__(self, path, resolution, n_channels=3):
        self._fh = open(path, "wb")
        self._res_fs = _fs(resolution)
        self._n_ch = n_channels
        self.n_tags = 0
        self._fh.write(_HEADER.pack(MAGIC, VERSION, self._res_fs, n_channels, 0))

    def write(self, channel, ticks):
        rec = np.empty(len(ticks), dtype=RECORD_DTYPE)
        rec["channel"] = channel
        rec["ticks"] = ticks
        rec.tofile(self._fh)
        self.n_tags += len(rec)

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, VERSION, self._res_fs, self._n_ch, self.n_tags))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _read_header(fh):
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise DataError("truncated tag file header")
    magic, version, res_fs, n_ch, n_tags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataError(f"not a tag file (magic {magic!r})")
    if version != VERSION:
        raise DataError(f"unsupported tag file version {version}")
    if res_fs == 0:
        raise DataError("tag file declares zero resolution")
    return res_fs * 1e-15, n_ch, n_tags


def read_binary(path, duration=None) -> TagStream:
    with open(path, "rb") as fh:
        res, n_ch, n_tags = _read_header(fh)
        rec = np.fromfile(fh, dtype=RECORD_DTYPE, count=n_tags)
    if len(rec) != n_tags:
        raise DataError(f"tag file declares {n_tags} tags but holds {len(rec)}")
    return TagStream(rec["channel"], rec["ticks"], res, n_ch, duration)


def iter_binary(path, chunk_tags=1 << 22):
    """Yield ``(resolution, n_channels, channel, ticks)`` chunks of a binary file."""
    with open(path, "rb") as fh:
        res, n_ch, n_tags = _read_header(fh)
        left = n_tags
        while left > 0:
            rec = np.fromfile(fh, dtype=RECORD_DTYPE, count=min(chunk_tags, left))
            if len(rec) == 0:
                raise DataError(f"tag file ended {left} tags early")
            left -= len(rec)
            yield res, n_ch, np.ascontiguousarray(rec["channel"]), np.ascontiguousarray(rec["ticks"])


# -- text -------------------------------------------------------------------

def write_text(stream: TagStream, path, comments=()):
    with open(path, "w", newline="\n") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(f"# resolution_fs={_fs(stream.resolution)}\n")
        fh.write(f"# n_channels={stream.n_channels}\n")
        fh.write(f"# duration_s={stream.duration!r}\n")
        fh.write("channel,ticks\n")
        buf = io.StringIO()
        np.savetxt(buf, np.column_stack([stream.channel.astype(np.uint64), stream.ticks]),
                   fmt="%d", delimiter=",")
        fh.write(buf.getvalue())


def read_text(path, resolution=None, duration=None) -> TagStream:
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if line.replace(" ", "") == "channel,ticks":
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"bad tag line: {line!r}")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise DataError(f"bad tag line: {line!r}") from None
    if resolution is None:
        if "resolution_fs" not in meta:
            raise DataError("text tag file has no resolution_fs comment; pass resolution explicitly")
        resolution = int(meta["resolution_fs"]) * 1e-15
    if duration is None and "duration_s" in meta:
        duration = float(meta["duration_s"])
    n_ch = int(meta.get("n_channels", 3))
    arr = np.array(rows, dtype=np.uint64).reshape(-1, 2)
    return TagStream(arr[:, 0].astype(np.uint8), arr[:, 1], resolution, n_ch, duration)


def read_tags(path, duration=None) -> TagStream:
    """Read either format, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_binary(path, duration=duration)
    return read_text(path, duration=duration)


def write_tags(stream: TagStream, path):
    """Write binary unless the suffix is .csv or .txt."""
    if Path(path).suffix.lower() in (".csv", ".txt"):
        write_text(stream, path)
    else:
        write_binary(stream, path)
