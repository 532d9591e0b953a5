"""End-to-end comparison of FLSP and rolling prediction.

For each model the harness trains once on a master-seed training series,
then streams every repetition through each (algorithm, buffer, mode)
combination and scores the emitted forecasts against the truth.
Repetitions differ only in the noise seed of the synthetic data, so the
trained model is shared. Neural repetitions run side by side as one batch.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import StreamConfig, emitted, make_session
from .neural import ModelSpec, TrainingDivergedError, build_model, train
from .sim import (
    GridSpec, ReportSchedule, default_profiles, emit_reports, generate, splitmix64,
)
from .stats import CollinearityError, SarimaOrder, SeriesTooShortError, StatBank

logger = logging.getLogger(__name__)

NEURAL = ("lstm", "cnn-lstm", "convlstm")
STATISTICAL = ("arima", "sarima")


# --------------------------------------------------------------------------
# metrics

def mse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise ValueError("nothing to score")
    return float(np.mean((predicted - actual) ** 2))


def neighbor_correlation(frames, center: tuple[int, int], channel: int = 0, radius: int = 1) -> np.ndarray:
    """Pearson correlation of the centre cell with each cell of its neighbourhood.

    Returns a ``(2r+1, 2r+1)`` map; positions off the grid or with a
    zero-variance series are NaN.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[:, channel]
    if len(frames) < 3:
        raise ValueError("need at least three slots")
    h, w = frames.shape[1:]
    r0, c0 = center
    x = frames[:, r0, c0] - frames[:, r0, c0].mean()
    sx = math.sqrt(float(x @ x))
    out = np.full((2 * radius + 1, 2 * radius + 1), np.nan)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, c = r0 + dr, c0 + dc
            if not (0 <= r < h and 0 <= c < w):
                continue
            y = frames[:, r, c] - frames[:, r, c].mean()
            sy = math.sqrt(float(y @ y))
            if sx > 0 and sy > 0:
                out[dr + radius, dc + radius] = float(x @ y) / (sx * sy)
    return out


# --------------------------------------------------------------------------
# plan

def _order(v) -> SarimaOrder:
    if isinstance(v, SarimaOrder):
        return v
    if isinstance(v, dict):
        return SarimaOrder(**v)
    return SarimaOrder(*v)


@dataclass(frozen=True)
class ExperimentPlan:
    models: tuple[str, ...] = ("arima", "sarima", "lstm", "cnn-lstm", "convlstm")
    algorithms: tuple[str, ...] = ("flsp", "rolling")
    # rolling buffer lengths in feed batches; None keeps the whole history
    buffers: tuple[int | None, ...] = (5, 10, 20)
    modes: tuple[str, ...] = ("sync", "async")
    repetitions: int = 20
    seed: int = 0
    seeds: tuple[int, ...] | None = None
    feed_length: int = 15
    span: int = 30
    train_length: int = 2000
    stream_length: int = 800
    height: int = 8
    width: int = 8
    data: str | None = None
    arima: SarimaOrder = SarimaOrder(3, 0, 5)
    sarima: SarimaOrder = SarimaOrder(1, 0, 1, 1, 0, 1, 144)
    epochs: int = 20
    lr: float = 0.005
    optimizer: str = "adam"
    window: int = 24
    streams: int = 8
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.repetitions:
            raise ValueError("explicit seeds must match the repetition count")
        bad = set(self.models) - set(NEURAL + STATISTICAL)
        if bad:
            raise ValueError(f"unknown models {sorted(bad)}")
        if set(self.algorithms) - {"flsp", "rolling"}:
            raise ValueError("algorithms are flsp and/or rolling")
        if set(self.modes) - {"sync", "async"}:
            raise ValueError("modes are sync and/or async")
        for b in self.buffers:
            if b is not None and b < 1:
                raise ValueError("buffer sizes are counted in feed batches and must be >= 1")
        if self.stream_length < self.span + self.feed_length:
            raise ValueError("stream too short for one feed")
        object.__setattr__(self, "arima", _order(self.arima))
        object.__setattr__(self, "sarima", _order(self.sarima))
        self.stream_config()

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.height, self.width)

    @property
    def center(self) -> tuple[int, int]:
        return self.height // 2, self.width // 2

    @property
    def n_feeds(self) -> int:
        # emitted slots (span + n*feed) must stay inside the stream
        return (self.stream_length - self.span) // self.feed_length

    def rep_seeds(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [splitmix64((self.seed << 16) + r + 1) & 0x7FFFFFFF for r in range(self.repetitions)]

    def stream_config(self, buffer: int | None = None, mode: str = "sync") -> StreamConfig:
        lb = None if buffer is None else buffer * self.feed_length
        return StreamConfig(self.train_length, self.feed_length, self.span, lb, mode, self.feed_length)

    def spec(self, arch: str) -> ModelSpec:
        kw = dict(self.model_overrides.get(arch, {}))
        if arch != "lstm":
            kw.setdefault("height", self.height)
            kw.setdefault("width", self.width)
        return ModelSpec.default(arch, **kw)

    def combinations(self, model: str) -> list[tuple[str, int | None, str]]:
        out = []
        for mode in self.modes:
            for algo in self.algorithms:
                for b in (self.buffers if algo == "rolling" else (None,)):
                    out.append((algo, b, mode))
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arima"] = dataclasses.asdict(self.arima)
        d["sarima"] = dataclasses.asdict(self.sarima)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown plan keys {sorted(unknown)}")
        for k in ("models", "algorithms", "buffers", "modes", "seeds"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def not_applicable(model: str, algorithm: str, mode: str) -> str | None:
    """Reason a combination cannot run, or None."""
    if model in STATISTICAL and algorithm == "flsp":
        return "no recurrent state to snapshot"
    if model in STATISTICAL and mode == "async":
        return "per-series model has no cross-cell estimates to merge"
    if model == "lstm" and mode == "async":
        return "single-cell model sees one reporting cell"
    return None


# --------------------------------------------------------------------------
# data

@dataclass
class Dataset:
    train: np.ndarray          # [T_train, C, H, W]
    reps: np.ndarray           # [R, T_train + T_stream, C, H, W]
    seeds: list[int]


def load_dataset(plan: ExperimentPlan) -> Dataset:
    seeds = plan.rep_seeds()
    total = plan.train_length + plan.stream_length
    if plan.data is None:
        grid = plan.grid
        profiles = default_profiles(grid, plan.seed)
        train_ = generate(grid, profiles, plan.train_length, seed=plan.seed)
        reps = np.stack([generate(grid, profiles, total, seed=s) for s in seeds])
        return Dataset(train_, reps, seeds)
    from .ingest import load_frames
    frames = load_frames(plan.data)
    need = total + (plan.repetitions - 1) * plan.stream_length
    if len(frames) < need:
        raise ValueError(f"{plan.data} has {len(frames)} slots; the plan needs {need}")
    # repetition r streams the r-th window after the training block
    reps = np.stack([frames[r * plan.stream_length:r * plan.stream_length + total]
                     for r in range(plan.repetitions)])
    return Dataset(frames[:plan.train_length], reps, seeds)


class ScaledPredictor:
    """Run a model on standardised frames while callers see original units."""

    def __init__(self, inner, mean: np.ndarray, std: np.ndarray):
        self.inner = inner
        self.mean = mean
        self.std = std

    @property
    def supports_state(self) -> bool:
        return getattr(self.inner, "supports_state", False)

    def reset(self):
        self.inner.reset()

    def snapshot(self):
        return self.inner.snapshot()

    def restore(self, state):
        self.inner.restore(state)

    def step(self, frame):
        z = (np.asarray(frame) - self.mean) / self.std
        return self.inner.step(z) * self.std + self.mean


def _channel_stats(series: np.ndarray, frame_ndim: int) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, series.ndim))
    mean = series.mean(axis=axes)
    std = series.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    shape = (-1,) + (1,) * (frame_ndim - 1)
    return mean.reshape(shape), std.reshape(shape)


def _view(model: str, frames: np.ndarray, center) -> np.ndarray:
    """Slice ``[..., C, H, W]`` frames down to what ``model`` consumes."""
    if model in NEURAL and model != "lstm":
        return frames
    r, c = center
    return frames[..., r, c]


# --------------------------------------------------------------------------
# running

@dataclass
class Row:
    model: str
    algorithm: str
    buffer: int | None
    mode: str
    status: str = "ok"
    mse: float = float("nan")
    mse_std: float = float("nan")
    per_seed: dict = field(default_factory=dict)
    wall_time: float = 0.0
    steps_per_feed: float = float("nan")
    slots_consumed_per_feed: float = float("nan")
    bandwidth: float = float("nan")
    note: str = ""

    @property
    def label(self) -> str:
        if self.algorithm == "rolling":
            return "rolling" if self.buffer is None else f"rolling BS={self.buffer}"
        return self.algorithm

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["per_seed"] = {str(k): v for k, v in self.per_seed.items()}
        return d


@dataclass
class ResultTable:
    rows: list[Row]
    plan: ExperimentPlan
    plot: list[dict] = field(default_factory=list)

    def get(self, model: str, algorithm: str, buffer: int | None = None, mode: str = "sync") -> Row:
        for r in self.rows:
            if (r.model, r.algorithm, r.buffer, r.mode) == (model, algorithm, buffer, mode):
                return r
        raise KeyError((model, algorithm, buffer, mode))

    def write_csv(self, path) -> None:
        cols = ["model", "algorithm", "buffer", "mode", "status", "mse", "mse_std", "wall_time",
                "steps_per_feed", "slots_consumed_per_feed", "bandwidth", "note"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                d = r.to_dict()
                w.writerow(["" if d[c] is None else d[c] for c in cols])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"plan": self.plan.to_dict(), "rows": [r.to_dict() for r in self.rows]}, indent=2,
            default=_json_default))

    def write_plot_data(self, path) -> None:
        cols = ["model", "mode", "algorithm", "slot", "channel", "actual", "predicted"]
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.plot)

    def format(self) -> str:
        """Models down the side; algorithm and buffer across, per mode."""
        labels = []
        for r in self.rows:
            key = (r.mode, r.label)
            if key not in labels:
                labels.append(key)
        models = list(dict.fromkeys(r.model for r in self.rows))
        head = ["Model"] + [f"{lab} ({mode})" for mode, lab in labels]
        body = []
        for m in models:
            line = [m]
            for mode, lab in labels:
                cell = next((r for r in self.rows if r.model == m and r.mode == mode and r.label == lab), None)
                if cell is None or cell.status == "NA":
                    line.append("NA")
                elif cell.status != "ok":
                    line.append(cell.status)
                else:
                    line.append(f"{cell.mse:.4g}")
            body.append(line)
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda row: "  ".join(x.rjust(w) for x, w in zip(row, widths))
        return "\n".join([fmt(head)] + [fmt(b) for b in body])


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _stream_feeds(plan: ExperimentPlan, truth: np.ndarray, mode: str, algo: str):
    """Sync feeds are raw frame batches; async feeds are report lists."""
    lf, ls = plan.feed_length, plan.train_length
    n = plan.n_feeds
    if mode == "sync":
        return [truth[ls + k * lf:ls + (k + 1) * lf] for k in range(n)], None
    schedule = ReportSchedule("async", collect=lf)
    # truth is [T, B, C, H, W]; reports carry every stream's values
    reports = list(emit_reports(truth, schedule, start=ls, n_frames=n,
                                consumer="rolling" if algo == "rolling" else "flsp"))
    batch = truth.shape[1]
    samples = sum(r.samples for reps in reports for r in reps) / batch
    return reports, samples


def _score(plan, records, truth, slots_axis_batch: bool):
    slots, frames = emitted(records)
    actual = truth[slots]
    if slots_axis_batch:
        # frames [n, B, ...] -> per-stream scores
        return [mse(frames[:, b], actual[:, b]) for b in range(frames.shape[1])], slots, frames
    return [mse(frames, actual)], slots, frames


def _bandwidth_sync(plan, batch_shape) -> float:
    per = int(np.prod(batch_shape)) * plan.feed_length
    return float(per * plan.n_feeds)


def fit_scaled(spec: ModelSpec, series: np.ndarray, *, epochs: int, lr: float, optimizer: str = "adam",
               window: int = 24, streams: int = 8, seed: int = 0) -> ScaledPredictor:
    """Train a fresh model on per-channel standardised ``series``."""
    net = build_model(spec, seed=seed)
    mean, std = _channel_stats(series, len(spec.frame_shape))
    train(net, (series - mean) / std, epochs=epochs, lr=lr, optimizer=optimizer,
          window=window, streams=streams, seed=seed)
    return ScaledPredictor(net, mean, std)


def _run_neural(plan: ExperimentPlan, model: str, data: Dataset, combos) -> tuple[list[Row], list[dict]]:
    rows, plot = [], []
    try:
        pred = fit_scaled(plan.spec(model), _view(model, data.train, plan.center), epochs=plan.epochs,
                          lr=plan.lr, optimizer=plan.optimizer, window=plan.window,
                          streams=plan.streams, seed=plan.seed)
    except TrainingDivergedError as exc:
        logger.warning("%s training diverged at epoch %d", model, exc.epoch)
        return [Row(model, a, b, m, status="diverged", note=str(exc)) for a, b, m in combos], plot
    # [T, B, ...] so each slot holds every repetition side by side
    truth = np.moveaxis(_view(model, data.reps, plan.center), 0, 1)
    seed = truth[:plan.train_length]
    for algo, buf, mode in combos:
        reason = not_applicable(model, algo, mode)
        if reason:
            rows.append(Row(model, algo, buf, mode, status="NA", note=reason))
            continue
        cfg = plan.stream_config(buf, mode)
        feeds, samples = _stream_feeds(plan, truth, mode, algo)
        session = make_session(algo, pred, cfg)
        t0 = time.perf_counter()
        records = list(session.run(seed, feeds))
        elapsed = time.perf_counter() - t0
        scores, slots, frames = _score(plan, records, truth, True)
        row = _make_row(model, algo, buf, mode, data.seeds, scores, elapsed / truth.shape[1], session)
        row.bandwidth = samples if samples is not None else _bandwidth_sync(plan, truth.shape[2:])
        rows.append(row)
        plot += _plot_rows(model, mode, row.label, slots, frames[:, 0], truth[slots, 0], plan.center)
    return rows, plot


def _run_stat(plan: ExperimentPlan, model: str, data: Dataset, combos) -> tuple[list[Row], list[dict]]:
    order = plan.arima if model == "arima" else plan.sarima
    rows, plot = [], []
    runnable = []
    for algo, buf, mode in combos:
        reason = not_applicable(model, algo, mode)
        if reason:
            rows.append(Row(model, algo, buf, mode, status="NA", note=reason))
        else:
            runnable.append((algo, buf, mode))
    if not runnable:
        return rows, plot
    # the online procedure keeps constant-size histories whatever the buffer,
    # so one run per repetition serves every rolling row
    scores, elapsed, work, plot_src = [], 0.0, None, None
    for i, s in enumerate(data.seeds):
        series = _view(model, data.reps[i], plan.center)          # [T, C]
        seed = series[:plan.train_length]
        feeds = [series[plan.train_length + k * plan.feed_length:
                        plan.train_length + (k + 1) * plan.feed_length] for k in range(plan.n_feeds)]
        try:
            t0 = time.perf_counter()
            bank = StatBank.fit_seed(seed, order)
            session = make_session("rolling", bank, plan.stream_config(None))
            records = list(session.run(seed, feeds))
            elapsed += time.perf_counter() - t0
        except (CollinearityError, SeriesTooShortError) as exc:
            logger.warning("%s fit failed for seed %d: %s", model, s, exc)
            scores.append(float("nan"))
            continue
        sc, slots, frames = _score(plan, records, series, False)
        scores.append(sc[0])
        work = session
        if plot_src is None:
            plot_src = (slots, frames, series[slots])
    for algo, buf, mode in runnable:
        row = _make_row(model, algo, buf, mode, data.seeds, scores, elapsed / len(data.seeds), work)
        row.bandwidth = _bandwidth_sync(plan, (_view(model, data.reps[0], plan.center).shape[1],))
        row.note = "online statistical update; buffer length does not apply"
        rows.append(row)
    if plot_src is not None:
        plot += _plot_rows(model, "sync", "rolling", *plot_src, plan.center)
    return rows, plot


def _make_row(model, algo, buf, mode, seeds, scores, wall, session) -> Row:
    arr = np.asarray(scores, dtype=np.float64)
    ok = np.isfinite(arr)
    row = Row(model, algo, buf, mode,
              status="ok" if ok.any() else "failed",
              mse=float(arr[ok].mean()) if ok.any() else float("nan"),
              mse_std=float(arr[ok].std()) if ok.any() else float("nan"),
              per_seed=dict(zip(seeds, arr.tolist())),
              wall_time=wall)
    if session is not None and session.work:
        row.steps_per_feed = float(np.mean(session.work))
        row.slots_consumed_per_feed = float(np.mean(session.consumed))
    return row


def _plot_rows(model, mode, label, slots, predicted, actual, center) -> list[dict]:
    out = []
    for i, slot in enumerate(slots):
        p = np.asarray(predicted[i])
        a = np.asarray(actual[i])
        if p.ndim == 3:
            p, a = p[:, center[0], center[1]], a[:, center[0], center[1]]
        for ch in range(p.shape[0]):
            out.append({"model": model, "mode": mode, "algorithm": label, "slot": int(slot),
                        "channel": ch, "actual": float(a[ch]), "predicted": float(p[ch])})
    return out


def run_model(plan: ExperimentPlan, model: str, data: Dataset | None = None):
    data = load_dataset(plan) if data is None else data
    combos = plan.combinations(model)
    if model in NEURAL:
        return _run_neural(plan, model, data, combos)
    return _run_stat(plan, model, data, combos)


def _task(args):
    plan, model = args
    return run_model(plan, model)


def run(plan: ExperimentPlan, *, jobs: int = 1, out_dir=None) -> ResultTable:
    """Run every combination of the plan.

    With ``out_dir`` each model's rows are appended to ``partial.jsonl`` as
    soon as they finish. ``jobs > 1`` spreads models over processes; the
    table is the same either way.
    """
    partial = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        partial = out_dir / "partial.jsonl"
        partial.write_text("")
    results: dict[str, tuple[list[Row], list[dict]]] = {}

    def flush(model, res):
        results[model] = res
        if partial is not None:
            with partial.open("a") as fh:
                for r in res[0]:
                    fh.write(json.dumps(r.to_dict(), default=_json_default) + "\n")

    if jobs > 1 and len(plan.models) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = {m: ex.submit(_task, (plan, m)) for m in plan.models}
            for m, f in futs.items():
                flush(m, f.result())
    else:
        data = load_dataset(plan)
        for m in plan.models:
            flush(m, run_model(plan, m, data))
    rows, plot = [], []
    for m in plan.models:
        rows += results[m][0]
        plot += results[m][1]
    return ResultTable(rows, plan, plot)
