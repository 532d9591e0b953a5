"""Call-detail-record parsing and aggregation into traffic frames.

Input rows are ``square_id, timestamp_ms, country_code, sms_in, sms_out,
call_in, call_out, internet``, tab- or comma-separated, with an optional
header line. Empty activity fields count as zero.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import container
from .sim import CHANNELS, GridSpec

FIELDS = ("square_id", "timestamp", "country_code", "sms_in", "sms_out", "call_in", "call_out", "internet")


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CdrRecord:
    square_id: int
    timestamp: int
    country_code: int = 0
    sms_in: float = 0.0
    sms_out: float = 0.0
    call_in: float = 0.0
    call_out: float = 0.0
    internet: float = 0.0

    @property
    def channels(self) -> tuple[float, float, float]:
        return (self.call_in + self.call_out, self.sms_in + self.sms_out, self.internet)


def _num(text: str, kind, name: str, line: int):
    text = text.strip()
    if not text:
        if name in ("square_id", "timestamp"):
            raise IngestError(f"missing {name}", line)
        return kind(0)
    try:
        v = kind(float(text)) if kind is int else float(text)
    except ValueError:
        raise IngestError(f"bad {name} value {text!r}", line) from None
    if kind is float and (not np.isfinite(v) or v < 0):
        raise IngestError(f"{name} must be a finite non-negative number, got {text!r}", line)
    return v


def _is_header(row: list[str]) -> bool:
    try:
        float(row[0])
        return False
    except (ValueError, IndexError):
        return True


def parse(source, *, strict: bool = True, errors: list | None = None) -> Iterator[CdrRecord]:
    """Parse records from a path, open file, or text.

    With ``strict=False`` malformed rows are skipped and their
    :class:`IngestError` appended to ``errors`` instead of raised.
    """
    is_path = isinstance(source, Path) or (isinstance(source, str) and source and "\n" not in source
                                            and Path(source).is_file())
    if is_path:
        with open(source, newline="") as fh:
            yield from _parse_lines(fh, strict, errors)
    elif isinstance(source, str):
        yield from _parse_lines(io.StringIO(source), strict, errors)
    else:
        yield from _parse_lines(source, strict, errors)


def _parse_lines(fh, strict: bool, errors) -> Iterator[CdrRecord]:
    first = fh.readline()
    if not first:
        return
    delim = "\t" if "\t" in first else ","
    rows = csv.reader(_chain(first, fh), delimiter=delim)
    kinds = (int, int, int, float, float, float, float, float)
    for lineno, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and _is_header(row):
            continue
        try:
            if len(row) > len(FIELDS) or len(row) < 2:
                raise IngestError(f"expected up to {len(FIELDS)} fields, got {len(row)}", lineno)
            row = row + [""] * (len(FIELDS) - len(row))
            vals = [_num(t, k, n, lineno) for t, k, n in zip(row, kinds, FIELDS)]
            yield CdrRecord(*vals)
        except IngestError as exc:
            if strict:
                raise
            if errors is not None:
                errors.append(exc)


def _chain(first: str, rest) -> Iterator[str]:
    yield first
    yield from rest


def read_mapping(path) -> dict[int, tuple[int, int]]:
    """CSV of ``square_id,row,col`` lines (header optional)."""
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and _is_header(row)):
                continue
            try:
                sid, r, c = (int(x) for x in row[:3])
            except ValueError:
                raise IngestError(f"bad mapping row {row!r}", lineno) from None
            out[sid] = (r, c)
    return out


def cell_of(square_id: int, grid: GridSpec, mapping: Mapping[int, tuple[int, int]] | None = None):
    if mapping is not None:
        if square_id not in mapping:
            raise IngestError(f"square id {square_id} has no mapping entry")
        r, c = mapping[square_id]
    else:
        # square ids count from 1, row-major over the grid width
        r, c = divmod(square_id - 1, grid.width)
    if not (0 <= r < grid.height and 0 <= c < grid.width):
        raise IngestError(f"square id {square_id} lies outside the {grid.height}x{grid.width} grid")
    return r, c


def aggregate(records: Iterable[CdrRecord], grid: GridSpec, window: tuple[int, int],
              mapping: Mapping[int, tuple[int, int]] | None = None) -> np.ndarray:
    """Sum records into frames ``[n_slots, 3, H, W]``.

    ``window`` is ``(start_ms, n_slots)``; records outside it are ignored and
    timestamps must sit on slot boundaries. Incoming and outgoing counts and
    all country codes are summed per cell and slot.
    """
    start, n = window
    slot_ms = grid.slot_minutes * 60_000
    frames = np.zeros((n, len(CHANNELS), grid.height, grid.width))
    for rec in records:
        r, c = cell_of(rec.square_id, grid, mapping)
        off = rec.timestamp - start
        if off % slot_ms:
            raise IngestError(f"timestamp {rec.timestamp} is not aligned to {grid.slot_minutes}-minute slots")
        k = off // slot_ms
        if 0 <= k < n:
            frames[k, :, r, c] += rec.channels
    return frames


def crop(frames: np.ndarray, rows: tuple[int, int], cols: tuple[int, int]) -> np.ndarray:
    """Half-open sub-grid ``[r0, r1) x [c0, c1)`` in local coordinates."""
    h, w = frames.shape[-2:]
    (r0, r1), (c0, c1) = rows, cols
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise IndexError(f"crop {rows}x{cols} outside a {h}x{w} grid")
    return frames[..., r0:r1, c0:c1].copy()


def pad(frames: np.ndarray, shape: tuple[int, int], offset: tuple[int, int]) -> np.ndarray:
    """Place a sub-grid back into a zero grid of ``shape`` at ``offset``."""
    h, w = frames.shape[-2:]
    r0, c0 = offset
    if r0 < 0 or c0 < 0 or r0 + h > shape[0] or c0 + w > shape[1]:
        raise IndexError("sub-grid does not fit at offset")
    out = np.zeros(frames.shape[:-2] + tuple(shape))
    out[..., r0:r0 + h, c0:c0 + w] = frames
    return out


# --------------------------------------------------------------------------
# frame files

def write_frames_csv(frames: np.ndarray, path, start_slot: int = 0) -> None:
    frames = np.asarray(frames)
    if frames.shape[1] != len(CHANNELS):
        raise ValueError("frame CSV holds exactly three channels")
    T, _, H, W = frames.shape
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "cell_row", "cell_col", *CHANNELS])
        for t in range(T):
            for r in range(H):
                for c in range(W):
                    w.writerow([start_slot + t, r, c, *(repr(float(v)) for v in frames[t, :, r, c])])


def read_frames_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestError("empty frame file")
    body = rows[1:] if _is_header(rows[0]) else rows
    try:
        data = np.array([[float(x) for x in r] for r in body if r])
    except ValueError as exc:
        raise IngestError(f"malformed frame file: {exc}") from None
    if data.size == 0:
        raise IngestError("frame file has no data rows")
    slots, rr, cc = (data[:, i].astype(int) for i in range(3))
    s0 = slots.min()
    frames = np.zeros((slots.max() - s0 + 1, len(CHANNELS), rr.max() + 1, cc.max() + 1))
    frames[slots - s0, :, rr, cc] = data[:, 3:]
    return frames


def save_frames(frames: np.ndarray, path, **meta) -> None:
    container.save(path, {"frames": np.asarray(frames, dtype=np.float64)}, {"kind": "frames", **meta})


def load_frames(path) -> np.ndarray:
    """Frames from a container (``.lcst``) or frame CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_frames_csv(path)
    arrays, meta = container.load(path)
    if meta.get("kind") != "frames" or "frames" not in arrays:
        raise container.ContainerError(f"{path} does not hold traffic frames")
    return arrays["frames"]
