"""Live prediction schedulers: FLSP (state snapshots) and rolling (history replay).

Slots are numbered from 0. The seed occupies ``[0, l_s)`` and feed ``k``
(1-based) delivers slots ``[l_s + (k-1) l_f, l_s + k l_f)``. After the seed
and after every feed the scheduler forecasts ``S_p`` slots ahead; the seed
forecast is emitted whole, later forecasts emit only their last ``l_f``
slots, so the emitted stream covers every slot from ``l_s`` onward once.

A predictor is anything with ``reset()``, ``step(frame) -> next frame`` and,
for FLSP, ``snapshot()``/``restore(state)`` plus ``supports_state = True``.
Statistical predictors instead expose ``start``/``forecast``/``update``.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .sim import ReportBatch


class CapabilityError(TypeError):
    """The predictor lacks a feature the scheduler needs."""


class ReportConflictError(ValueError):
    """Two reports disagree about the same cell and slot."""


@dataclass(frozen=True)
class StreamConfig:
    seed_length: int
    feed_length: int = 15
    span: int = 30
    buffer_length: int | None = None
    mode: str = "sync"
    collect: int | None = None

    def __post_init__(self):
        if self.feed_length < 1:
            raise ValueError("feed length must be >= 1")
        if self.span < self.feed_length:
            raise ValueError("prediction span must cover the feed interval")
        if self.seed_length < 1:
            raise ValueError("seed length must be >= 1")
        if self.buffer_length is not None and self.buffer_length < self.feed_length:
            raise ValueError("rolling buffer must hold at least one feed")
        if self.mode not in ("sync", "async"):
            raise ValueError(f"unknown gathering mode {self.mode!r}")
        if self.collect is not None and self.collect != self.feed_length:
            raise ValueError("collection frame must equal the feed length")

    @property
    def collect_frame(self) -> int:
        return self.collect or self.feed_length


@dataclass(frozen=True)
class ForecastRecord:
    step: int
    slot: int
    frame: np.ndarray
    emitted: bool


class CountingPredictor:
    """Proxy that counts ``step`` invocations."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def step(self, frame):
        self.calls += 1
        return self.inner.step(frame)


@dataclass
class HistoryBuffer:
    """Chronological frames with per-entry actual/estimate flags."""

    capacity: int | None
    slots: deque = field(default_factory=deque)
    frames: deque = field(default_factory=deque)
    actual: deque = field(default_factory=deque)
    peak: int = 0

    def append(self, slot: int, frame: np.ndarray, actual: np.ndarray | bool = True) -> None:
        self.slots.append(slot)
        self.frames.append(np.array(frame, dtype=np.float64))
        self.actual.append(np.broadcast_to(np.asarray(actual, dtype=bool), _cell_shape(frame)).copy())
        while self.capacity is not None and len(self.frames) > self.capacity:
            self.slots.popleft()
            self.frames.popleft()
            self.actual.popleft()
        self.peak = max(self.peak, len(self.frames))

    def __len__(self) -> int:
        return len(self.frames)

    def array(self) -> np.ndarray:
        return np.stack(list(self.frames)) if self.frames else np.empty((0,))

    def apply_reports(self, reports: Iterable[ReportBatch]) -> None:
        """Overwrite buffered estimates with any reported actual values."""
        if not self.slots:
            return
        first = self.slots[0]
        last = self.slots[-1] + 1
        for rep in reports:
            rep = rep.clip(first, last)
            for i, slot in enumerate(range(rep.start, rep.stop)):
                idx = slot - first
                frame = self.frames[idx]
                _write_cells(frame, self.actual[idx], rep.rows, rep.cols, rep.values[i])


def _cell_shape(frame) -> tuple[int, ...]:
    frame = np.asarray(frame)
    return frame.shape[:-3] + frame.shape[-2:] if frame.ndim >= 3 else frame.shape[:-1]


def _write_cells(frame, actual, rows, cols, values) -> None:
    # frame [..., C, H, W]; values [C, n_cells] or [..., C, n_cells]
    cur = frame[..., :, rows, cols]
    known = actual[..., rows, cols]
    vals = np.broadcast_to(values, cur.shape)
    clash = known[..., None, :] & (cur != vals)
    if clash.any():
        raise ReportConflictError("contradictory reports for the same cell and slot")
    frame[..., :, rows, cols] = vals
    actual[..., rows, cols] = True


def merge_reports(estimates: np.ndarray, reports: Sequence[ReportBatch], start: int = 0):
    """Overlay reported actual values on an estimate window.

    Parameters
    ----------
    estimates : ndarray
        ``[n, (B,) C, H, W]`` frames for slots ``[start, start + n)``.
    reports : sequence of ReportBatch
        Every report must lie inside the window.

    Returns
    -------
    frames, actual : ndarray
        The merged frames and a ``[n, (B,) H, W]`` mask of reported cells.
    """
    est = np.array(estimates, dtype=np.float64)
    n = len(est)
    actual = np.zeros(est.shape[:-3] + est.shape[-2:], dtype=bool)
    for rep in reports:
        if rep.start < start or rep.stop > start + n:
            raise ValueError(f"report slots [{rep.start}, {rep.stop}) outside window [{start}, {start + n})")
        for i, slot in enumerate(range(rep.start, rep.stop)):
            _write_cells(est[slot - start], actual[slot - start], rep.rows, rep.cols, rep.values[i])
    return est, actual


def _as_reports(feed) -> list[ReportBatch] | None:
    if isinstance(feed, ReportBatch):
        return [feed]
    if isinstance(feed, (list, tuple)) and feed and all(isinstance(r, ReportBatch) for r in feed):
        return list(feed)
    return None


# --------------------------------------------------------------------------
# core steps

def _consume(predictor, frames) -> np.ndarray:
    y = None
    for f in frames:
        y = predictor.step(f)
    return y


def _predict(predictor, first: np.ndarray, span: int) -> np.ndarray:
    """Forecast ``span`` slots: ``first`` plus ``span`` recursive steps.

    The final recursive output lies past the span and is discarded; it is
    still computed so each forecast costs exactly ``span`` predictor calls.
    """
    out = [first]
    x = first
    for _ in range(span):
        x = predictor.step(x)
        out.append(x)
    return np.stack(out[:span])


def async_flsp_step(predictor, state, merged: np.ndarray, span: int):
    """Advance a saved state over the latest merged frames and forecast.

    Returns ``(new_state, forecast)``; older, never-reported history is not
    revisited.
    """
    predictor.restore(state)
    y = _consume(predictor, merged)
    new_state = predictor.snapshot()
    return new_state, _predict(predictor, y, span)


class _Session:
    kind = "base"

    def __init__(self, predictor, config: StreamConfig):
        self.counter = CountingPredictor(predictor)
        self.config = config
        self.step_index = 0
        self.next_slot = 0
        self.forecast: np.ndarray | None = None
        self.forecast_start = 0
        self.work: list[int] = []
        self.consumed: list[int] = []

    @property
    def predictor(self):
        return self.counter.inner

    def _records(self, forecast: np.ndarray, first_slot: int) -> list[ForecastRecord]:
        self.forecast = forecast
        self.forecast_start = first_slot
        span = self.config.span
        emit_from = 0 if self.step_index == 0 else span - self.config.feed_length
        recs = [ForecastRecord(self.step_index, first_slot + i, forecast[i], i >= emit_from)
                for i in range(span)]
        self.step_index += 1
        return recs

    def _estimates(self, start: int, n: int) -> np.ndarray:
        off = start - self.forecast_start
        return self.forecast[off:off + n]

    def _fresh_window(self, feed) -> tuple[np.ndarray, np.ndarray, list[ReportBatch] | None]:
        lf = self.config.feed_length
        start = self.next_slot
        reports = _as_reports(feed)
        if reports is None:
            frames = np.asarray(feed, dtype=np.float64)
            if len(frames) != lf:
                raise ValueError(f"feed must contain {lf} frames, got {len(frames)}")
            return frames, np.ones((lf,) + _cell_shape(frames[0]), dtype=bool), None
        clipped = [r.clip(start, start + lf) for r in reports]
        frames, actual = merge_reports(self._estimates(start, lf), clipped, start)
        return frames, actual, reports

    def feed(self, feed) -> list[ForecastRecord]:
        raise NotImplementedError

    def run(self, seed, feeds: Iterable) -> Iterator[ForecastRecord]:
        yield from self.start(seed)
        for f in feeds:
            yield from self.feed(f)


class FlspSession(_Session):
    """Snapshot/restore scheduler; holds one recurrent state and no history."""

    kind = "flsp"

    def __init__(self, predictor, config: StreamConfig):
        if not getattr(predictor, "supports_state", False):
            raise CapabilityError(f"{type(predictor).__name__} has no restorable state; FLSP needs one")
        super().__init__(predictor, config)
        self.state = None

    def start(self, seed) -> list[ForecastRecord]:
        seed = np.asarray(seed, dtype=np.float64)
        p = self.counter
        p.reset()
        y = _consume(p, seed)
        self.state = p.snapshot()
        fc = _predict(p, y, self.config.span)
        self.next_slot = len(seed)
        return self._records(fc, len(seed))

    def feed(self, feed) -> list[ForecastRecord]:
        frames, _, _ = self._fresh_window(feed)
        before = self.counter.calls
        self.state, fc = async_flsp_step(self.counter, self.state, frames, self.config.span)
        self.work.append(self.counter.calls - before)
        self.consumed.append(len(frames))
        self.next_slot += len(frames)
        return self._records(fc, self.next_slot)

    @property
    def history_frames(self) -> int:
        return 0


class RollingSession(_Session):
    """Fixed-window scheduler: reset the predictor and replay buffer + fresh data."""

    kind = "rolling"

    def __init__(self, predictor, config: StreamConfig):
        super().__init__(predictor, config)
        self.buffer = HistoryBuffer(config.buffer_length)

    def _replay(self, frames: np.ndarray) -> np.ndarray:
        p = self.counter
        p.reset()
        y = _consume(p, frames)
        return _predict(p, y, self.config.span)

    def start(self, seed) -> list[ForecastRecord]:
        seed = np.asarray(seed, dtype=np.float64)
        lb, lf = self.config.buffer_length, self.config.feed_length
        window = seed if lb is None else seed[-(lb + lf):]
        fc = self._replay(window)
        kept = seed if lb is None else seed[-lb:]
        for i, frame in enumerate(kept):
            self.buffer.append(len(seed) - len(kept) + i, frame)
        self.next_slot = len(seed)
        return self._records(fc, len(seed))

    def feed(self, feed) -> list[ForecastRecord]:
        frames, actual, reports = self._fresh_window(feed)
        if reports is not None:
            self.buffer.apply_reports(reports)
            updated = {s for r in reports for s in range(r.start, r.stop)}
            self.consumed.append(len(updated))
        else:
            self.consumed.append(len(frames))
        hist = self.buffer.array()
        replay = np.concatenate([hist, frames]) if len(hist) else frames
        before = self.counter.calls
        fc = self._replay(replay)
        self.work.append(self.counter.calls - before)
        for i in range(len(frames)):
            self.buffer.append(self.next_slot + i, frames[i], actual[i])
        self.next_slot += len(frames)
        return self._records(fc, self.next_slot)

    @property
    def history_frames(self) -> int:
        return len(self.buffer)


class StatRollingSession(_Session):
    """Online statistical procedure: constant-size histories, updated in place."""

    kind = "rolling"

    def start(self, seed) -> list[ForecastRecord]:
        seed = np.asarray(seed, dtype=np.float64)
        self.predictor.start(seed)
        self.next_slot = len(seed)
        return self._records(self.predictor.forecast(self.config.span), len(seed))

    def feed(self, feed) -> list[ForecastRecord]:
        frames = np.asarray(feed, dtype=np.float64)
        if len(frames) != self.config.feed_length:
            raise ValueError(f"feed must contain {self.config.feed_length} values")
        self.predictor.update(frames)
        self.work.append(len(frames) + self.config.span)
        self.consumed.append(len(frames))
        self.next_slot += len(frames)
        return self._records(self.predictor.forecast(self.config.span), self.next_slot)


def make_session(algorithm: str, predictor, config: StreamConfig) -> _Session:
    if algorithm == "flsp":
        return FlspSession(predictor, config)
    if algorithm == "rolling":
        if hasattr(predictor, "update") and hasattr(predictor, "forecast") and not hasattr(predictor, "step"):
            return StatRollingSession(predictor, config)
        return RollingSession(predictor, config)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def flsp_session(predictor, config: StreamConfig, seed, feeds: Iterable) -> Iterator[ForecastRecord]:
    return FlspSession(predictor, config).run(seed, feeds)


def rolling_session(predictor, config: StreamConfig, seed, feeds: Iterable) -> Iterator[ForecastRecord]:
    return make_session("rolling", predictor, config).run(seed, feeds)


def emitted(records: Iterable[ForecastRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Slots and frames of the monitoring stream, in slot order."""
    recs = sorted((r for r in records if r.emitted), key=lambda r: r.slot)
    if not recs:
        return np.empty(0, dtype=int), np.empty((0,))
    return np.array([r.slot for r in recs]), np.stack([r.frame for r in recs])


def write_transcript(records: Iterable[ForecastRecord], path, truth: np.ndarray | None = None,
                     cell: tuple[int, int] | None = None) -> None:
    """CSV with one line per (slot, cell, channel) of every forecast.

    ``truth`` (indexed by absolute slot) fills the ``actual`` column where known.
    """
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "slot", "emitted", "row", "col", "channel", "predicted", "actual"])
        for rec in records:
            frame = np.asarray(rec.frame)
            known = truth is not None and rec.slot < len(truth)
            if frame.ndim == 0:
                frame = frame.reshape(1)
            if frame.ndim == 1:
                r0, c0 = cell or (0, 0)
                act = np.asarray(truth[rec.slot]).reshape(-1) if known else None
                for ch, v in enumerate(frame):
                    w.writerow([rec.step, rec.slot, int(rec.emitted), r0, c0, ch, repr(float(v)),
                                repr(float(act[ch])) if known else ""])
                continue
            act = np.asarray(truth[rec.slot]) if known else None
            C, H, W = frame.shape[-3:]
            for r in range(H):
                for c in range(W):
                    for ch in range(C):
                        w.writerow([rec.step, rec.slot, int(rec.emitted), r, c, ch,
                                    repr(float(frame[ch, r, c])),
                                    repr(float(act[ch, r, c])) if known else ""])
