"""Event streams: CSV I/O, polarity count images, activity maps, synthetic events."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, Tensor

LOG_EPS = 1e-3


class EventParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(eq=False)
class EventStream:
    """Time-sorted events for a sensor of ``height`` x ``width`` pixels.

    Columns are parallel int64 arrays: ``t`` (microseconds), ``x``, ``y`` and
    polarity ``p`` in {0, 1}.
    """

    height: int
    width: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int) -> EventStream:
        z = np.zeros(0, dtype=np.int64)
        return cls(height, width, z, z.copy(), z.copy(), z.copy())

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.height, self.width) == (other.height, other.width) and all(
            np.array_equal(a, b) for a, b in zip(self.columns(), other.columns())
        )

    def columns(self):
        return self.t, self.x, self.y, self.p

    def in_window(self, t0: int, t1: int) -> np.ndarray:
        return (self.t >= t0) & (self.t < t1)


def parse_events(text: str, height: int, width: int) -> EventStream:
    """Parse ``t_us,x,y,p`` CSV lines. A header line is optional.

    Out-of-range coordinates or polarities raise :class:`EventParseError`
    naming the line. Unsorted timestamps are repaired with a stable sort and a
    warning.
    """
    rows = []
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != 4:
            raise EventParseError(lineno, f"expected 4 fields, got {len(rec)}")
        try:
            t, x, y, p = (int(f) for f in rec)
        except ValueError:
            if lineno == 1 and not rows:
                continue  # header
            raise EventParseError(lineno, f"non-integer field in {rec!r}") from None
        if t < 0:
            raise EventParseError(lineno, f"negative timestamp {t}")
        if not (0 <= x < width and 0 <= y < height):
            raise EventParseError(lineno, f"coordinate ({x}, {y}) outside {width}x{height} sensor")
        if p not in (0, 1):
            raise EventParseError(lineno, f"polarity {p} not in {{0, 1}}")
        rows.append((t, x, y, p))

    if not rows:
        return EventStream.empty(height, width)
    arr = np.asarray(rows, dtype=np.int64)
    if np.any(np.diff(arr[:, 0]) < 0):
        warnings.warn("event timestamps not monotone; applying stable sort", stacklevel=2)
        arr = arr[np.argsort(arr[:, 0], kind="stable")]
    return EventStream(height, width, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())


def serialize_events(s: EventStream) -> str:
    lines = ["t_us,x,y,p"]
    lines += [f"{t},{x},{y},{p}" for t, x, y, p in zip(*(c.tolist() for c in s.columns()))]
    return "\n".join(lines) + "\n"


def read_events(path, height: int, width: int) -> EventStream:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_events(fh.read(), height, width)


def write_events(path, s: EventStream) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_events(s))


def polarity_counts(s: EventStream, t0: int, t1: int, height: int, width: int) -> np.ndarray:
    """Raw [2, H, W] per-polarity counts of events in [t0, t1)."""
    keep = s.in_window(t0, t1)
    counts = np.zeros((2, height, width))
    np.add.at(counts, (s.p[keep], s.y[keep], s.x[keep]), 1.0)
    return counts


def events_to_frame(s: EventStream, t0: int, t1: int, height: int, width: int) -> Tensor:
    """2-channel polarity histogram, each channel divided by its own max."""
    if t0 >= t1:
        raise ConfigError(f"empty window [{t0}, {t1})")
    counts = polarity_counts(s, t0, t1, height, width)
    peak = counts.reshape(2, -1).max(axis=1)
    for ch in range(2):
        if peak[ch] > 0:
            counts[ch] /= peak[ch]
    return Tensor(counts)


@dataclass
class ActivityMap:
    grid: Tensor
    stride: int

    @property
    def total(self) -> float:
        return float(self.grid.data.sum())


def activity_map(s: EventStream, t0: int, t1: int, height: int, width: int, stride: int) -> ActivityMap:
    if stride <= 0 or height % stride or width % stride:
        raise ConfigError(f"token stride {stride} does not divide {height}x{width}")
    keep = s.in_window(t0, t1)
    grid = np.zeros((height // stride, width // stride))
    np.add.at(grid, (s.y[keep] // stride, s.x[keep] // stride), 1.0)
    return ActivityMap(Tensor(grid), stride)


def synth_events(frame_a: Tensor, frame_b: Tensor, threshold: float, t0: int, t1: int) -> EventStream:
    """Contrast-threshold event model between two [1, H, W] intensity frames.

    Each pixel fires floor(|log(b+eps) - log(a+eps)| / threshold) events of the
    sign of the change, evenly spaced over [t0, t1).
    """
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    if threshold <= 0:
        raise ConfigError("threshold must be positive")
    _, height, width = frame_a.shape
    diff = np.log(frame_b.data[0] + LOG_EPS) - np.log(frame_a.data[0] + LOG_EPS)
    counts = np.floor(np.abs(diff) / threshold).astype(np.int64)

    ts, xs, ys, ps = [], [], [], []
    span = t1 - t0
    for y, x in zip(*np.nonzero(counts)):
        n = int(counts[y, x])
        pol = 1 if diff[y, x] > 0 else 0
        for k in range(n):
            ts.append(t0 + (k * span) // n)
            xs.append(x)
            ys.append(y)
            ps.append(pol)
    if not ts:
        return EventStream.empty(height, width)
    t = np.asarray(ts, dtype=np.int64)
    order = np.argsort(t, kind="stable")
    cols = [np.asarray(c, dtype=np.int64)[order] for c in (ts, xs, ys, ps)]
    return EventStream(height, width, *cols)


def window_of(s: EventStream) -> tuple[int, int]:
    """Smallest [t0, t1) window covering the whole stream."""
    if len(s) == 0:
        return 0, 1
    return int(s.t[0]), int(s.t[-1]) + 1

