"""Synthetic grid traffic and base-station report scheduling.

Frames are arrays of shape ``[T, C, H, W]`` (slot, channel, row, column);
channel order is call, SMS, internet.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

CHANNELS = ("call", "sms", "internet")
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class GridSpec:
    height: int = 8
    width: int = 8
    channels: int = 3
    slot_minutes: int = 10

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("grid dims and channel count must be >= 1")
        if self.slot_minutes < 1 or 1440 % self.slot_minutes:
            raise ValueError("slot length must divide a day")

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.slot_minutes

    @property
    def cells(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class CellProfile:
    base: float = 50.0
    daily_amplitude: float = 0.0
    daily_phase: float = 0.0
    weekly_amplitude: float = 0.0
    trend: float = 0.0
    noise_std: float = 0.0


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def cell_seed(master: int, row: int, col: int, width: int) -> int:
    return splitmix64((master & MASK64) ^ splitmix64(row * width + col + 1))


def default_profiles(grid: GridSpec, seed: int = 0) -> list[list[CellProfile]]:
    """Hot-spot load field with shared daily/weekly rhythm and mild per-cell jitter."""
    rng = np.random.default_rng(splitmix64(seed ^ 0x5EED))
    rows, cols = np.mgrid[0:grid.height, 0:grid.width]
    cy, cx = (grid.height - 1) * rng.uniform(0.3, 0.7), (grid.width - 1) * rng.uniform(0.3, 0.7)
    spread = max(grid.height, grid.width) / 2.0
    field_ = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * spread ** 2))
    profiles = []
    for r in range(grid.height):
        row = []
        for c in range(grid.width):
            base = 40.0 + 60.0 * field_[r, c] * rng.uniform(0.9, 1.1)
            row.append(CellProfile(
                base=base,
                daily_amplitude=0.6 * base,
                daily_phase=rng.normal(0.0, 0.1),
                weekly_amplitude=0.15 * base,
                trend=0.0,
                noise_std=0.06 * base,
            ))
        profiles.append(row)
    return profiles


def generate(grid: GridSpec, profiles: Sequence[Sequence[CellProfile]] | None = None,
             length: int = 2000, seed: int = 0, *, channel_scale: Sequence[float] = (1.0, 0.6, 2.5),
             start: int = 0, smooth_radius: int = 1, smooth_strength: float = 0.5) -> np.ndarray:
    """Seasonal traffic frames ``[length, C, H, W]``.

    Each cell is ``base + trend*t + daily + weekly + noise`` clamped at zero,
    scaled per channel, then blended with its neighbourhood mean. ``start``
    offsets the time axis so consecutive windows line up. Noise comes from a
    per-cell generator seeded by splitmix of ``seed``, so cells are
    independent of evaluation order.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if profiles is None:
        profiles = default_profiles(grid, seed)
    if len(channel_scale) < grid.channels:
        channel_scale = tuple(channel_scale) + (1.0,) * (grid.channels - len(channel_scale))
    t = np.arange(start, start + length, dtype=np.float64)
    day = grid.slots_per_day
    frames = np.empty((length, grid.channels, grid.height, grid.width))
    for r in range(grid.height):
        for c in range(grid.width):
            p = profiles[r][c]
            shape = (p.base + p.trend * t
                     + p.daily_amplitude * np.sin(2 * np.pi * t / day + p.daily_phase)
                     + p.weekly_amplitude * np.sin(2 * np.pi * t / (7 * day)))
            rng = np.random.default_rng(cell_seed(seed, r, c, grid.width))
            noise = rng.normal(0.0, 1.0, size=(grid.channels, length)) * p.noise_std if p.noise_std else 0.0
            vals = np.maximum(shape[None, :] + noise, 0.0)
            frames[:, :, r, c] = (vals * np.asarray(channel_scale[:grid.channels])[:, None]).T
    return spatial_smooth(frames, smooth_radius, smooth_strength)


def spatial_smooth(frames: np.ndarray, radius: int = 1, strength: float = 0.5) -> np.ndarray:
    """Blend each cell with the mean of its ``(2r+1)^2`` neighbourhood (clipped at edges)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    frames = np.asarray(frames, dtype=np.float64)
    if strength == 0.0 or radius == 0:
        return frames.copy()
    h, w = frames.shape[-2:]
    pad = [(0, 0)] * (frames.ndim - 2) + [(radius, radius), (radius, radius)]
    padded = np.pad(frames, pad)
    ones = np.pad(np.ones((h, w)), [(radius, radius), (radius, radius)])
    total = np.zeros_like(frames)
    count = np.zeros((h, w))
    k = 2 * radius + 1
    for a in range(k):
        for b in range(k):
            total += padded[..., a:a + h, b:b + w]
            count += ones[a:a + h, b:b + w]
    mean = total / count
    return (1.0 - strength) * frames + strength * mean


def autocorrelation(x, lag: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    denom = float((x * x).sum())
    return float((x[lag:] * x[:-lag]).sum() / denom) if denom else float("nan")


# --------------------------------------------------------------------------
# reporting

@dataclass(frozen=True)
class ReportSchedule:
    """Who reports when.

    ``groups`` maps each cell to a report group; in async mode group ``g``
    reports on frames ``k`` with ``k % n_groups == g``. The default async
    assignment is the checkerboard parity of ``row + col``.
    """

    mode: str = "sync"
    collect: int = 15
    groups: np.ndarray | None = None
    n_groups: int = 2

    def __post_init__(self):
        if self.mode not in ("sync", "async"):
            raise ValueError(f"unknown gathering mode {self.mode!r}")
        if self.collect < 1:
            raise ValueError("collection frame must be >= 1 slot")

    def group_map(self, height: int, width: int) -> np.ndarray:
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=int)
            if g.shape != (height, width):
                raise ValueError("group map does not match grid")
            return g
        rows, cols = np.mgrid[0:height, 0:width]
        return (rows + cols) % self.n_groups


@dataclass(frozen=True)
class ReportBatch:
    """Actual values for a set of cells over slots ``[start, stop)``.

    ``values`` is ``[stop - start, C, n_cells]`` aligned with ``rows``/``cols``
    (with an extra leading batch axis after the slot axis for batched streams).
    """

    frame: int
    start: int
    stop: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @property
    def samples(self) -> int:
        return int(self.values.size)

    @property
    def n_cells(self) -> int:
        return int(self.rows.size)

    def clip(self, start: int, stop: int) -> "ReportBatch":
        lo, hi = max(start, self.start), min(stop, self.stop)
        if hi <= lo:
            return ReportBatch(self.frame, lo, lo, self.rows, self.cols, self.values[:0])
        return ReportBatch(self.frame, lo, hi, self.rows, self.cols,
                           self.values[lo - self.start:hi - self.start])


def report_window(schedule: ReportSchedule, consumer: str) -> int:
    """Slots carried per report: async rolling needs two collection frames."""
    if schedule.mode == "async" and consumer == "rolling":
        return schedule.n_groups * schedule.collect
    return schedule.collect


def emit_reports(frames: np.ndarray, schedule: ReportSchedule, *, start: int = 0,
                 n_frames: int | None = None, consumer: str = "flsp") -> Iterator[list[ReportBatch]]:
    """Yield the reports delivered at the end of each collection frame.

    Frame ``k`` ends at slot ``start + (k+1)*collect``. Sync: every cell
    reports that frame's slots. Async: only the cells of group ``k % n_groups``
    report, carrying the latest ``collect`` slots (FLSP consumer) or the
    latest ``n_groups*collect`` slots (rolling consumer), clipped at slot 0.
    """
    frames = np.asarray(frames)
    if consumer not in ("flsp", "rolling"):
        raise ValueError(f"unknown consumer {consumer!r}")
    total, height, width = frames.shape[0], frames.shape[-2], frames.shape[-1]
    f = schedule.collect
    if n_frames is None:
        n_frames = (total - start) // f
    if n_frames < 1 or start + f > total:
        raise ValueError("frames do not cover a collection frame")
    groups = schedule.group_map(height, width)
    window = report_window(schedule, consumer)
    all_rows, all_cols = np.mgrid[0:height, 0:width]
    all_rows, all_cols = all_rows.ravel(), all_cols.ravel()
    for k in range(n_frames):
        end = start + (k + 1) * f
        if end > total:
            break
        if schedule.mode == "sync":
            rows, cols = all_rows, all_cols
        else:
            sel = groups.ravel() == k % schedule.n_groups
            rows, cols = all_rows[sel], all_cols[sel]
        lo = max(0, end - window)
        values = frames[lo:end][..., rows, cols]
        yield [ReportBatch(k, lo, end, rows, cols, values)]


@dataclass
class BandwidthMeter:
    """Running count of scalar samples transmitted."""

    per_frame: list[int] = field(default_factory=list)

    def record(self, reports: Iterable[ReportBatch]) -> int:
        n = sum(r.samples for r in reports)
        self.per_frame.append(n)
        return n

    @property
    def total(self) -> int:
        return sum(self.per_frame)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.per_frame, dtype=np.int64)


def bandwidth_meter(stream: Iterable[Sequence[ReportBatch]]) -> BandwidthMeter:
    meter = BandwidthMeter()
    for reports in stream:
        meter.record(reports)
    return meter
