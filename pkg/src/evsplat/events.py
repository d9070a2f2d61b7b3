"""Event-camera data model: streams, slicing, accumulation, and an ideal simulator.

Brightness is handled in the shifted log domain ``L = log(I + eps)`` with
intensities normalized to [0, 1]; the shift keeps zero pixels finite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# Shift used by the log map; shared with the latent-image reconstruction.
DEFAULT_LOG_EPS = 1e-3

_EVT_MAGIC = b"EVT1"
_EVT_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])


class EventModelError(ValueError):
    """Raised on invalid event data or simulator inputs."""


def log_intensity(image: np.ndarray, eps: float = DEFAULT_LOG_EPS) -> np.ndarray:
    """Map a [0, 1] intensity image to the shifted log domain."""
    img = np.asarray(image, dtype=np.float64)
    return np.log(img + eps)


@dataclass(frozen=True)
class Event:
    """A single polarity spike: timestamp, pixel, and sign."""

    t: float
    x: int
    y: int
    p: int


class EventStream:
    """A time-sorted event sequence over a fixed sensor, stored column-wise.

    Columns are ``t`` (float64 seconds), ``x``/``y`` (int32 pixel indices) and
    ``p`` (int8 polarity in {-1, +1}).
    """

    def __init__(
        self,
        t: np.ndarray,
        x: np.ndarray,
        y: np.ndarray,
        p: np.ndarray,
        sensor_size: tuple[int, int],
    ):
        self.t = np.asarray(t, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.p = np.asarray(p, dtype=np.int8)
        self.sensor_size = (int(sensor_size[0]), int(sensor_size[1]))
        self._validate()

    def _validate(self) -> None:
        n = self.t.shape[0]
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise EventModelError("event columns have mismatched lengths")
        w, h = self.sensor_size
        if w <= 0 or h <= 0:
            raise EventModelError(f"invalid sensor size {self.sensor_size}")
        if n == 0:
            return
        if not np.all(np.isfinite(self.t)):
            raise EventModelError("non-finite event timestamp")
        if np.any(self.t < 0):
            raise EventModelError("negative event timestamp")
        if np.any(np.diff(self.t) < 0):
            raise EventModelError("event timestamps are not sorted")
        if np.any((self.x < 0) | (self.x >= w) | (self.y < 0) | (self.y >= h)):
            raise EventModelError("event outside sensor bounds")
        if not np.all(np.abs(self.p) == 1):
            raise EventModelError("polarity must be -1 or +1")

    @classmethod
    def empty(cls, sensor_size: tuple[int, int]) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, sensor_size)

    @classmethod
    def from_events(
        cls, events: Sequence[Event], sensor_size: tuple[int, int]
    ) -> "EventStream":
        t = np.array([e.t for e in events], dtype=np.float64)
        x = np.array([e.x for e in events], dtype=np.int32)
        y = np.array([e.y for e in events], dtype=np.int32)
        p = np.array([e.p for e in events], dtype=np.int8)
        return cls(t, x, y, p, sensor_size)

    def __len__(self) -> int:
        return self.t.shape[0]

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.sensor_size == other.sensor_size
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class EventFrame:
    """Per-pixel signed event counts accumulated over [t_a, t_b)."""

    counts: np.ndarray
    t_a: float
    t_b: float

    def __post_init__(self):
        if not self.t_a < self.t_b:
            raise EventModelError(f"empty interval [{self.t_a}, {self.t_b})")


@dataclass(frozen=True)
class SubintervalGrid:
    """N-way partition of every inter-frame gap.

    Subinterval boundaries of gap ``i`` are ``t_i + j * (t_{i+1} - t_i) / N``
    for ``j = 0..N``; the grid therefore has ``(F - 1) * N + 1`` distinct
    timestamps for F frames.
    """

    frame_times: np.ndarray
    n_sub: int

    def __post_init__(self):
        times = np.asarray(self.frame_times, dtype=np.float64)
        object.__setattr__(self, "frame_times", times)
        if times.ndim != 1 or times.shape[0] < 2:
            raise EventModelError("need at least two frame times")
        if np.any(np.diff(times) <= 0):
            raise EventModelError("frame times must be strictly increasing")
        if self.n_sub < 1:
            raise EventModelError("subinterval count must be >= 1")

    @property
    def n_frames(self) -> int:
        return self.frame_times.shape[0]

    @property
    def n_times(self) -> int:
        return (self.n_frames - 1) * self.n_sub + 1

    def gap_times(self, i: int) -> np.ndarray:
        """Boundaries t_{i,0..N} of frame gap ``i`` (inclusive of t_{i+1})."""
        t0, t1 = self.frame_times[i], self.frame_times[i + 1]
        j = np.arange(self.n_sub + 1, dtype=np.float64)
        return t0 + j * (t1 - t0) / self.n_sub

    def all_times(self) -> np.ndarray:
        """Every grid timestamp t_{i,j}, deduplicated across gap boundaries."""
        out = [self.gap_times(i)[:-1] for i in range(self.n_frames - 1)]
        out.append(self.frame_times[-1:])
        return np.concatenate(out)

    def time_at(self, g: int) -> float:
        """Timestamp of global grid index ``g`` (0 <= g < n_times)."""
        i, j = self.locate(g)
        if j == 0:
            return float(self.frame_times[i])
        return float(self.gap_times(i)[j])

    def locate(self, g: int) -> tuple[int, int]:
        """Map a global grid index to (frame gap i, subinterval j)."""
        if not 0 <= g < self.n_times:
            raise EventModelError(f"grid index {g} out of range")
        if g == self.n_times - 1:
            return self.n_frames - 1, 0
        return g // self.n_sub, g % self.n_sub

    def frame_index(self, g: int) -> int:
        """Index of the latest frame with timestamp <= grid time ``g``."""
        i, _ = self.locate(g)
        return i


def partition(frame_times: Sequence[float], n_sub: int) -> SubintervalGrid:
    """Partition the gaps between frame timestamps into ``n_sub`` subintervals."""
    return SubintervalGrid(np.asarray(frame_times, dtype=np.float64), int(n_sub))


def subintervals_for_interval(frame_dt: float, target_dt: float) -> int:
    """Number of subintervals that keeps the subinterval length near a target.

    A 1 s frame gap with a 1/6 s target yields 6; a 1/3 s gap yields 2.
    """
    if frame_dt <= 0 or target_dt <= 0:
        raise EventModelError("intervals must be positive")
    return max(1, round(frame_dt / target_dt))


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------

def simulate_events(
    log_frames: Sequence[np.ndarray],
    timestamps: Sequence[float],
    contrast: float,
    threshold_jitter: float = 0.0,
    seed: int = 0,
) -> EventStream:
    """Ideal integrate-and-fire event simulation from log-intensity frames.

    Each pixel keeps a reference level; when the linear-in-time log intensity
    between consecutive frames crosses ``k`` thresholds, ``k`` events fire with
    linearly interpolated timestamps and the reference advances by ``k * C``.

    Args:
        log_frames: log-intensity images, identical shape.
        timestamps: strictly increasing frame times (seconds).
        contrast: threshold C > 0.
        threshold_jitter: optional per-pixel uniform threshold jitter as a
            fraction of C (0.1 means +-10%); 0 disables it.
        seed: rng seed for the jitter draw.

    Returns:
        Time-sorted EventStream over the frame sensor.
    """
    if len(log_frames) < 2:
        raise EventModelError("need at least two frames")
    if len(log_frames) != len(timestamps):
        raise EventModelError("one timestamp per frame required")
    if contrast <= 0:
        raise EventModelError("contrast threshold must be positive")
    frames = [np.asarray(f, dtype=np.float64) for f in log_frames]
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise EventModelError("frames have mismatched dimensions")
    times = np.asarray(timestamps, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise EventModelError("timestamps must be strictly increasing")

    h, w = shape
    if threshold_jitter:
        rng = np.random.default_rng(seed)
        c_pix = contrast * (
            1.0 + rng.uniform(-threshold_jitter, threshold_jitter, size=shape)
        ).ravel()
    else:
        c_pix = np.full(h * w, contrast, dtype=np.float64)

    ref = frames[0].ravel().copy()
    ts_out: list[np.ndarray] = []
    xs_out: list[np.ndarray] = []
    ys_out: list[np.ndarray] = []
    ps_out: list[np.ndarray] = []

    for f in range(len(frames) - 1):
        la = frames[f].ravel()
        lb = frames[f + 1].ravel()
        ta, tb = times[f], times[f + 1]
        diff = lb - ref
        sign = np.sign(diff).astype(np.int8)
        k = np.floor(np.abs(diff) / c_pix).astype(np.int64)
        firing = np.nonzero(k > 0)[0]
        if firing.size == 0:
            continue
        counts = k[firing]
        total = int(counts.sum())
        # flat index of the emitting pixel for each event, then the event's
        # ordinal m = 1..k within its pixel
        pix = np.repeat(firing, counts)
        ends = np.cumsum(counts)
        m = np.arange(total) - np.repeat(ends - counts, counts) + 1
        sgn = sign[pix].astype(np.float64)
        levels = ref[pix] + sgn * m * c_pix[pix]
        s = (levels - la[pix]) / (lb[pix] - la[pix])
        ts = ta + s * (tb - ta)
        ts_out.append(ts)
        xs_out.append(pix % w)
        ys_out.append(pix // w)
        ps_out.append(sign[pix])
        ref[firing] += sign[firing] * counts * c_pix[firing]

    if not ts_out:
        return EventStream.empty((w, h))
    t_all = np.concatenate(ts_out)
    x_all = np.concatenate(xs_out)
    y_all = np.concatenate(ys_out)
    p_all = np.concatenate(ps_out)
    order = np.argsort(t_all, kind="stable")
    return EventStream(t_all[order], x_all[order], y_all[order], p_all[order], (w, h))


def slice_stream(stream: EventStream, t_a: float, t_b: float) -> EventStream:
    """Events with t_a <= t < t_b, order preserved."""
    if t_a >= t_b:
        raise EventModelError(f"empty slice window [{t_a}, {t_b})")
    i0 = int(np.searchsorted(stream.t, t_a, side="left"))
    i1 = int(np.searchsorted(stream.t, t_b, side="left"))
    return EventStream(
        stream.t[i0:i1], stream.x[i0:i1], stream.y[i0:i1], stream.p[i0:i1],
        stream.sensor_size,
    )


def accumulate(
    stream: EventStream,
    t_a: float,
    t_b: float,
    size: tuple[int, int] | None = None,
) -> EventFrame:
    """Sum event polarities per pixel over [t_a, t_b) into a signed count grid."""
    w, h = size if size is not None else stream.sensor_size
    if len(stream) and (np.any(stream.x >= w) | np.any(stream.y >= h)):
        raise EventModelError("event outside the requested accumulation size")
    part = slice_stream(stream, t_a, t_b)
    counts = np.zeros((h, w), dtype=np.int64)
    np.add.at(counts, (part.y, part.x), part.p.astype(np.int64))
    return EventFrame(counts, float(t_a), float(t_b))


def event_frames_on_grid(stream: EventStream, grid: SubintervalGrid) -> list[EventFrame]:
    """One EventFrame per grid subinterval, in global index order."""
    times = grid.all_times()
    return [accumulate(stream, times[g], times[g + 1]) for g in range(len(times) - 1)]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_events_text(path: str | Path, stream: EventStream) -> None:
    """One event per line: ``t x y p``; header comments carry the sensor size."""
    w, h = stream.sensor_size
    with open(path, "w") as fh:
        fh.write(f"# sensor {w} {h}\n")
        for i in range(len(stream)):
            fh.write(
                f"{float(stream.t[i])!r} {stream.x[i]} {stream.y[i]} {stream.p[i]}\n"
            )


def save_events_binary(path: str | Path, stream: EventStream) -> None:
    """Packed little-endian records behind an ``EVT1`` magic header."""
    rec = np.empty(len(stream), dtype=_EVT_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    w, h = stream.sensor_size
    with open(path, "wb") as fh:
        fh.write(_EVT_MAGIC)
        fh.write(struct.pack("<IIQ", w, h, len(stream)))
        fh.write(rec.tobytes())


def load_events(path: str | Path) -> EventStream:
    """Load an event file, auto-detecting text vs ``EVT1`` binary by magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _EVT_MAGIC:
        return _load_events_binary(path)
    return _load_events_text(path)


def _load_events_binary(path: str | Path) -> EventStream:
    with open(path, "rb") as fh:
        fh.read(4)
        w, h, count = struct.unpack("<IIQ", fh.read(16))
        rec = np.frombuffer(fh.read(count * _EVT_RECORD.itemsize), dtype=_EVT_RECORD)
    if rec.shape[0] != count:
        raise EventModelError(f"truncated event file {path}")
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], (w, h))


def _load_events_text(path: str | Path) -> EventStream:
    ts, xs, ys, ps = [], [], [], []
    sensor: tuple[int, int] | None = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 3 and parts[0] == "sensor":
                    sensor = (int(parts[1]), int(parts[2]))
                continue
            f = line.split()
            if len(f) != 4:
                raise EventModelError(f"malformed event line: {line!r}")
            ts.append(float(f[0]))
            xs.append(int(f[1]))
            ys.append(int(f[2]))
            ps.append(int(f[3]))
    if sensor is None:
        w = max(xs) + 1 if xs else 1
        h = max(ys) + 1 if ys else 1
        sensor = (w, h)
    return EventStream(
        np.array(ts), np.array(xs), np.array(ys), np.array(ps), sensor
    )
