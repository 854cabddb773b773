"""Event-camera data: streams, ESIM-style simulation, voxel grids, and file formats.

Everything in this module is pure numpy and immutable after construction, so
all operations are safe to call concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EventParseError,
    InsufficientInputError,
    InvalidArgumentError,
    MalformedSequenceError,
    MalformedStreamError,
)

# Crossing tolerance of the simulator, in log-intensity units.  Ramps whose
# magnitude lands exactly on a multiple of the contrast threshold would
# otherwise be knife-edge cases under floating point rounding.
CROSSING_TOL = 1e-12

# Binary event-file record: timestamp, column, row, polarity.
_BIN_MAGIC = b"EVB1"
_BIN_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])


@dataclass(frozen=True)
class Event:
    """A single brightness-change event: column, row, time (s), polarity (+1/-1)."""

    x: int
    y: int
    t: float
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-sorted events over a fixed sensor geometry and time window.

    Arrays are parallel: ``t`` (float64 seconds), ``x``/``y`` (int64 pixel
    coordinates), ``p`` (int8 polarity, +1 or -1).
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: float
    t_end: float

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.int64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.int8))

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def validate(self) -> "EventStream":
        """Check all stream invariants, raising MalformedStreamError on violation."""
        n = len(self)
        if not (self.x.shape == self.y.shape == self.p.shape == (n,)):
            raise MalformedStreamError("event arrays have inconsistent lengths")
        if self.width <= 0 or self.height <= 0:
            raise MalformedStreamError("sensor geometry must be positive")
        if self.t_end < self.t_start:
            raise MalformedStreamError("window end precedes window start")
        if n == 0:
            return self
        if np.any(np.diff(self.t) < 0):
            raise MalformedStreamError("event timestamps are not sorted")
        if np.any((self.t < self.t_start) | (self.t > self.t_end)):
            raise MalformedStreamError("event timestamp outside the declared window")
        if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
            raise MalformedStreamError("event coordinates outside the sensor geometry")
        if np.any(np.abs(self.p) != 1):
            raise MalformedStreamError("polarity must be +1 or -1")
        return self

    def events(self):
        """Iterate over Event records (slow path, for tests and small streams)."""
        for i in range(len(self)):
            yield Event(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.p[i]))

    @staticmethod
    def empty(width: int, height: int, t_start: float = 0.0, t_end: float = 0.0) -> "EventStream":
        z = np.zeros(0)
        return EventStream(z, z, z, z, width, height, t_start, t_end)

    @staticmethod
    def from_arrays(t, x, y, p, width, height, t_start=None, t_end=None) -> "EventStream":
        t = np.asarray(t, dtype=np.float64)
        if t_start is None:
            t_start = float(t[0]) if t.size else 0.0
        if t_end is None:
            t_end = float(t[-1]) if t.size else 0.0
        return EventStream(t, x, y, p, width, height, float(t_start), float(t_end)).validate()


@dataclass(frozen=True)
class VoxelGrid:
    """Bilinear temporal accumulation of event polarities: values is bins x H x W."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 3:
            raise InvalidArgumentError("voxel grid values must be bins x H x W")

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    def total_mass(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class FrameSequence:
    """Ordered grayscale frames (N x H x W, intensities in [0,1]) with timestamps."""

    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=np.float64))
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.float64))

    def validate(self) -> "FrameSequence":
        if self.frames.ndim != 3:
            raise MalformedSequenceError("frames must be N x H x W")
        if self.frames.shape[0] != self.timestamps.shape[0]:
            raise MalformedSequenceError("frame count differs from timestamp count")
        if self.timestamps.size >= 2 and np.any(np.diff(self.timestamps) <= 0):
            raise MalformedSequenceError("timestamps must be strictly increasing")
        return self

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])


def voxelize(stream: EventStream, bins: int) -> VoxelGrid:
    """Accumulate a stream into a bins x H x W grid with bilinear temporal weights.

    Each event at normalized time ``t* = (bins-1) * (t - t_start) / (t_end - t_start)``
    contributes ``p * max(0, 1 - |b - t*|)`` to every bin ``b``.  A zero-duration
    window puts every event into bin 0.
    """
    if bins < 1:
        raise InvalidArgumentError(f"bins must be >= 1, got {bins}")
    stream.validate()
    grid = np.zeros((bins, stream.height, stream.width), dtype=np.float64)
    n = len(stream)
    if n == 0:
        return VoxelGrid(grid)

    duration = stream.t_end - stream.t_start
    if duration <= 0.0 or bins == 1:
        tstar = np.zeros(n, dtype=np.float64)
    else:
        tstar = (bins - 1) * (stream.t - stream.t_start) / duration

    b0 = np.floor(tstar).astype(np.int64)
    frac = tstar - b0
    pol = stream.p.astype(np.float64)

    flat = grid.reshape(bins, -1)
    pix = stream.y * stream.width + stream.x

    lo_ok = (b0 >= 0) & (b0 < bins)
    np.add.at(flat, (b0[lo_ok], pix[lo_ok]), pol[lo_ok] * (1.0 - frac[lo_ok]))
    hi_ok = (b0 + 1 >= 0) & (b0 + 1 < bins) & (frac > 0)
    np.add.at(flat, (b0[hi_ok] + 1, pix[hi_ok]), pol[hi_ok] * frac[hi_ok])
    return VoxelGrid(grid)


def polarity_histogram(stream: EventStream) -> np.ndarray:
    """Brute-force per-pixel signed polarity accumulation (oracle for bins == 1)."""
    acc = np.zeros((stream.height, stream.width), dtype=np.float64)
    np.add.at(acc, (stream.y, stream.x), stream.p.astype(np.float64))
    return acc


def simulate_events(seq: FrameSequence, contrast_threshold: float, eps: float = 1e-3) -> EventStream:
    """ESIM-style event simulation from a grayscale frame sequence.

    Per pixel, log intensity ``L = ln(I + eps)`` is linearly interpolated between
    consecutive frames.  An event fires each time the interpolated signal moves a
    full ``contrast_threshold`` away from the pixel's reference level; the
    reference then resets to the crossed level (hysteresis).  Crossing times are
    the exact linear-interpolation solutions.  The result is sorted by
    (t, y, x, p).
    """
    if contrast_threshold <= 0:
        raise InvalidArgumentError("contrast_threshold must be positive")
    if eps <= 0:
        raise InvalidArgumentError("eps must be positive")
    seq.validate()
    if len(seq) < 2:
        raise InsufficientInputError("need at least 2 frames to simulate events")

    height, width = seq.height, seq.width
    log_frames = np.log(seq.frames + eps)
    ref = log_frames[0].copy()

    ys, xs = np.mgrid[0:height, 0:width]
    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []

    c = float(contrast_threshold)
    for k in range(len(seq) - 1):
        l0 = log_frames[k]
        l1 = log_frames[k + 1]
        tau0 = seq.timestamps[k]
        dtau = seq.timestamps[k + 1] - tau0
        slope = l1 - l0

        for sign in (1.0, -1.0):
            d = (l1 - ref) * sign
            n = np.floor(d / c + CROSSING_TOL).astype(np.int64)
            n[d <= 0] = 0
            max_n = int(n.max()) if n.size else 0
            for j in range(1, max_n + 1):
                mask = n >= j
                level = ref[mask] + sign * j * c
                # slope is nonzero wherever a crossing happened
                tj = tau0 + dtau * (level - l0[mask]) / slope[mask]
                chunks_t.append(tj)
                chunks_x.append(xs[mask])
                chunks_y.append(ys[mask])
                chunks_p.append(np.full(int(mask.sum()), int(sign), dtype=np.int8))
            ref = ref + sign * n * c

    t_start = float(seq.timestamps[0])
    t_end = float(seq.timestamps[-1])
    if not chunks_t:
        return EventStream.empty(width, height, t_start, t_end)

    t = np.concatenate(chunks_t)
    x = np.concatenate(chunks_x)
    y = np.concatenate(chunks_y)
    p = np.concatenate(chunks_p)
    # Deterministic merge order regardless of how pixels were traversed.
    order = np.lexsort((p, x, y, t))
    # Crossing times can overshoot the window by a few ulp; clip for safety.
    t = np.clip(t[order], t_start, t_end)
    return EventStream(t, x[order], y[order], p[order], width, height, t_start, t_end).validate()


def rescale_stream(stream: EventStream, width: int, height: int) -> EventStream:
    """Rescale event coordinates to a new geometry by nearest-pixel mapping."""
    if width < 1 or height < 1:
        raise InvalidArgumentError("target geometry must be positive")
    x = np.minimum((stream.x * width) // stream.width, width - 1)
    y = np.minimum((stream.y * height) // stream.height, height - 1)
    return EventStream(stream.t, x, y, stream.p, width, height, stream.t_start, stream.t_end)


# --------------------------------------------------------------------------
# On-disk formats.  Text (.evt): header "W H t_start t_end", then one
# "t x y p" record per line.  Binary (.evb): magic, geometry/window header,
# then fixed-width little-endian records.  Both round-trip bit exactly.
# --------------------------------------------------------------------------


def write_events(stream: EventStream, path) -> None:
    path = Path(path)
    if path.suffix == ".evb":
        _write_binary(stream, path)
    else:
        _write_text(stream, path)


def read_events(path) -> EventStream:
    path = Path(path)
    if path.suffix == ".evb":
        return _read_binary(path)
    return _read_text(path)


def _write_text(stream: EventStream, path: Path) -> None:
    lines = [f"{stream.width} {stream.height} {float(stream.t_start)!r} {float(stream.t_end)!r}"]
    for i in range(len(stream)):
        lines.append(f"{float(stream.t[i])!r} {int(stream.x[i])} {int(stream.y[i])} {int(stream.p[i])}")
    path.write_text("\n".join(lines) + "\n")


def _read_text(path: Path) -> EventStream:
    with open(path, "r") as fh:
        header = fh.readline()
        if not header.strip():
            raise EventParseError("missing header line", path, 1)
        parts = header.split()
        if len(parts) != 4:
            raise EventParseError("header must be 'W H t_start t_end'", path, 1)
        try:
            width, height = int(parts[0]), int(parts[1])
            t_start, t_end = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise EventParseError(f"bad header field: {exc}", path, 1) from exc

        ts, xs, ys, ps = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise EventParseError("record must be 't x y p'", path, lineno)
            try:
                t, x, y, p = float(fields[0]), int(fields[1]), int(fields[2]), int(fields[3])
            except ValueError as exc:
                raise EventParseError(f"bad record field: {exc}", path, lineno) from exc
            if p not in (1, -1):
                raise EventParseError(f"polarity must be +1 or -1, got {p}", path, lineno)
            if not (0 <= x < width and 0 <= y < height):
                raise EventParseError(f"coordinates ({x},{y}) outside {width}x{height}", path, lineno)
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)

    stream = EventStream(np.array(ts), np.array(xs, dtype=np.int64), np.array(ys, dtype=np.int64),
                         np.array(ps, dtype=np.int8), width, height, t_start, t_end)
    try:
        return stream.validate()
    except MalformedStreamError as exc:
        raise EventParseError(str(exc), path, None) from exc


def _write_binary(stream: EventStream, path: Path) -> None:
    rec = np.empty(len(stream), dtype=_BIN_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    header = _BIN_MAGIC + struct.pack("<IIddQ", stream.width, stream.height,
                                      stream.t_start, stream.t_end, len(stream))
    path.write_bytes(header + rec.tobytes())


def _read_binary(path: Path) -> EventStream:
    raw = path.read_bytes()
    head_len = len(_BIN_MAGIC) + struct.calcsize("<IIddQ")
    if len(raw) < head_len or raw[:4] != _BIN_MAGIC:
        raise EventParseError("not a binary event file", path, 0)
    width, height, t_start, t_end, count = struct.unpack("<IIddQ", raw[4:head_len])
    body = raw[head_len:]
    if len(body) != count * _BIN_RECORD.itemsize:
        raise EventParseError(f"expected {count} records, file is truncated", path, 0)
    rec = np.frombuffer(body, dtype=_BIN_RECORD)
    if count and np.any(np.abs(rec["p"].astype(np.int64)) != 1):
        bad = int(np.flatnonzero(np.abs(rec["p"].astype(np.int64)) != 1)[0])
        raise EventParseError("polarity must be +1 or -1", path, bad)
    stream = EventStream(rec["t"].astype(np.float64), rec["x"].astype(np.int64),
                         rec["y"].astype(np.int64), rec["p"].astype(np.int8),
                         int(width), int(height), float(t_start), float(t_end))
    try:
        return stream.validate()
    except MalformedStreamError as exc:
        raise EventParseError(str(exc), path, None) from exc
