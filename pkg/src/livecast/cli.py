"""Command-line entry point.

Every subcommand writes its outputs plus ``manifest.json`` (effective
config, seed, library versions and output checksums) into ``--out-dir``.
Values from ``--config`` (flat JSON) act as defaults that explicit flags
override; ``LIVECAST_SEED`` overrides the config file's seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, complexity, container, engine, harness, ingest, neural, sim, stats

log = logging.getLogger("livecast")


class UsageError(Exception):
    """Bad configuration; maps to exit status 2."""


# --------------------------------------------------------------------------
# helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import scipy
    return {"livecast": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out_dir: Path, command: str, config: dict, outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "versions": _versions(),
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _effective(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _order(args) -> stats.SarimaOrder:
    if args.model == "arima":
        return stats.SarimaOrder(args.p, args.d, args.q)
    return stats.SarimaOrder(args.p, args.d, args.q, args.P, args.D, args.Q, args.m)


def _spec(args) -> neural.ModelSpec:
    kw = dict(hidden=args.hidden, lstm_layers=args.lstm_layers, dense_layers=args.dense_layers,
              kernel=args.kernel, channels=args.channels, dropout=args.dropout)
    if args.model != "lstm":
        kw.update(height=args.height, width=args.width)
    if args.cnn_channels is not None:
        kw["cnn_channels"] = args.cnn_channels
    if args.convlstm_channels is not None:
        kw["convlstm_channels"] = args.convlstm_channels
    return neural.ModelSpec.default(args.model, **kw)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("arima", "sarima", "lstm", "cnn-lstm", "convlstm"), default="convlstm")
    g = p.add_argument_group("statistical order")
    for name, default in (("p", 1), ("d", 0), ("q", 1), ("P", 0), ("D", 0), ("Q", 0), ("m", 1)):
        g.add_argument(f"--{name}", type=int, default=default)
    g = p.add_argument_group("network shape")
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--lstm-layers", type=int, default=2)
    g.add_argument("--dense-layers", type=int, default=2)
    g.add_argument("--kernel", type=int, default=3)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--height", type=int, default=8)
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--cnn-channels", type=_ints, default=None)
    g.add_argument("--convlstm-channels", type=_ints, default=None)
    g.add_argument("--dropout", type=float, default=0.0)


# --------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    out = _out_dir(args)
    grid = sim.GridSpec(args.height, args.width, 3, args.slot_minutes)
    frames = sim.generate(grid, length=args.length, seed=args.seed, start=args.start,
                          smooth_radius=args.smooth_radius, smooth_strength=args.smooth_strength)
    path = out / ("frames.csv" if args.format == "csv" else "frames.lcst")
    if args.format == "csv":
        ingest.write_frames_csv(frames, path, start_slot=args.start)
    else:
        ingest.save_frames(frames, path, seed=args.seed)
    write_manifest(out, "generate", _effective(args), [path])
    print(path)
    return 0


def cmd_ingest(args) -> int:
    out = _out_dir(args)
    grid = sim.GridSpec(args.height, args.width, 3, args.slot_minutes)
    mapping = ingest.read_mapping(args.mapping) if args.mapping else None
    errors: list = []
    records = []
    for src in args.inputs:
        records.extend(ingest.parse(Path(src), strict=not args.lenient, errors=errors))
    for e in errors:
        log.warning("skipped %s", e)
    frames = ingest.aggregate(records, grid, (args.start_ms, args.slots), mapping)
    if args.crop:
        r0, r1, c0, c1 = args.crop
        frames = ingest.crop(frames, (r0, r1), (c0, c1))
    path = out / ("frames.csv" if args.format == "csv" else "frames.lcst")
    if args.format == "csv":
        ingest.write_frames_csv(frames, path)
    else:
        ingest.save_frames(frames, path)
    write_manifest(out, "ingest", _effective(args), [path])
    print(path)
    return 0


def _center_series(frames: np.ndarray, cell) -> np.ndarray:
    r, c = cell if cell else (frames.shape[-2] // 2, frames.shape[-1] // 2)
    return frames[..., r, c]


def cmd_train(args) -> int:
    out = _out_dir(args)
    frames = ingest.load_frames(args.data)
    series = frames[:args.train_length] if args.train_length else frames
    if args.model in ("arima", "sarima"):
        order = _order(args)
        cell = _center_series(series, args.cell)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            models = [stats.fit(cell[:, ch], order) for ch in range(cell.shape[1])]
        path = out / "model.json"
        path.write_text(json.dumps({"kind": "stat", "cell": args.cell,
                                    "channels": [m.to_dict() for m in models]}, indent=2))
    else:
        spec = _spec(args)
        data = series if args.model != "lstm" else _center_series(series, args.cell)
        if args.model != "lstm" and data.shape[-2:] != (spec.height, spec.width):
            raise UsageError(f"data grid {data.shape[-2:]} does not match --height/--width")
        pred = harness.fit_scaled(spec, data, epochs=args.epochs, lr=args.lr, optimizer=args.optimizer,
                                  window=args.window, streams=args.streams, seed=args.seed)
        path = out / "model.lcst"
        neural.save_model(pred.inner, path, {"scale": {"mean": pred.mean.ravel().tolist(),
                                                       "std": pred.std.ravel().tolist()},
                                             "cell": args.cell})
    write_manifest(out, "train", _effective(args), [path])
    print(path)
    return 0


def load_predictor(path):
    """Returns ``(predictor, cell)``; cell is None for grid models."""
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        if d.get("kind") != "stat":
            raise UsageError(f"{path} is not a statistical model file")
        models = [stats.SarimaModel.from_dict(m) for m in d["channels"]]
        return StatChannels(models), d.get("cell") or "center"
    arrays, meta = container.load(path)
    model = neural.load_model(path)
    sc = meta.get("scale")
    if sc is None:
        return model, (meta.get("cell") or "center") if model.spec.arch == "lstm" else None
    shape = (-1,) + (1,) * (len(model.spec.frame_shape) - 1)
    pred = harness.ScaledPredictor(model, np.array(sc["mean"]).reshape(shape), np.array(sc["std"]).reshape(shape))
    return pred, (meta.get("cell") or "center") if model.spec.arch == "lstm" else None


class StatChannels(stats.StatBank):
    """Already-fitted per-channel models that start on the session seed."""

    def __init__(self, models):
        super().__init__([stats.StatPredictor(m) for m in models], (len(models),))


def cmd_predict(args) -> int:
    out = _out_dir(args)
    pred, cell = load_predictor(args.weights)
    frames = ingest.load_frames(args.data)
    if cell is not None:
        if cell == "center":
            cell = (frames.shape[-2] // 2, frames.shape[-1] // 2)
        frames = _center_series(frames, cell)
        if args.mode == "async":
            raise UsageError("asynchronous gathering needs a grid model")
    ls, lf = args.seed_length, args.feed
    n = args.feeds if args.feeds is not None else (len(frames) - ls - args.span) // lf
    if n < 0 or ls + n * lf > len(frames):
        raise UsageError("data too short for the requested seed and feeds")
    buffer = None if args.buffer is None else args.buffer * lf
    cfg = engine.StreamConfig(ls, lf, args.span, buffer, args.mode, lf)
    if args.mode == "sync":
        feeds = [frames[ls + k * lf:ls + (k + 1) * lf] for k in range(n)]
    else:
        feeds = list(sim.emit_reports(frames, sim.ReportSchedule("async", collect=lf), start=ls,
                                      n_frames=n, consumer=args.algo))
    try:
        session = engine.make_session(args.algo, pred, cfg)
    except engine.CapabilityError as exc:
        raise UsageError(str(exc)) from None
    records = list(session.run(frames[:ls], feeds))
    path = out / "transcript.csv"
    engine.write_transcript(records, path, truth=frames, cell=tuple(cell) if cell is not None else None)
    write_manifest(out, "predict", _effective(args), [path])
    slots, est = engine.emitted(records)
    inside = slots < len(frames)
    if inside.any():
        print(f"mse {harness.mse(est[inside], frames[slots[inside]]):.6g}")
    print(path)
    return 0


def cmd_experiment(args) -> int:
    out = _out_dir(args)
    plan_dict = json.loads(Path(args.plan).read_text()) if args.plan else {}
    if args.seed is not None:
        plan_dict["seed"] = args.seed
    if args.repetitions is not None:
        plan_dict["repetitions"] = args.repetitions
    try:
        plan = harness.ExperimentPlan.from_dict(plan_dict)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad plan: {exc}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        table = harness.run(plan, jobs=args.jobs, out_dir=out)
    paths = [out / "results.csv", out / "results.json", out / "plot_data.csv", out / "table.txt"]
    table.write_csv(paths[0])
    table.write_json(paths[1])
    table.write_plot_data(paths[2])
    paths[3].write_text(table.format() + "\n")
    cfg = _effective(args)
    cfg["plan"] = plan.to_dict()
    write_manifest(out, "experiment", cfg, paths)
    print(table.format())
    return 0


def cmd_complexity(args) -> int:
    if args.formulas:
        print(complexity.formula_table())
        return 0
    model = _order(args) if args.model in ("arima", "sarima") else _spec(args)
    cfg = None
    if args.buffer_length is not None:
        cfg = engine.StreamConfig(max(args.span, 1), args.feed, args.span, args.buffer_length)
    report = complexity.cost_report(model, batch=args.batch, buffer=args.buffer, config=cfg)
    text = report.to_json() if args.format == "json" else complexity.format_reports([report])
    print(text)
    if args.out_dir:
        out = _out_dir(args)
        path = out / "cost.json"
        path.write_text(report.to_json() + "\n")
        write_manifest(out, "complexity", _effective(args), [path])
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="livecast", description="Live traffic forecasting toolkit.")
    parser.add_argument("--version", action="version", version=f"livecast {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat JSON file supplying defaults for any flag")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=out_required, default=None)

    p = sub.add_parser("generate", help="synthetic traffic frames")
    common(p)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--length", type=int, default=2800)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--slot-minutes", type=int, default=10)
    p.add_argument("--smooth-radius", type=int, default=1)
    p.add_argument("--smooth-strength", type=float, default=0.5)
    p.add_argument("--format", choices=("lcst", "csv"), default="lcst")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="aggregate call detail records into frames")
    common(p)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--height", type=int, default=100)
    p.add_argument("--width", type=int, default=100)
    p.add_argument("--slot-minutes", type=int, default=10)
    p.add_argument("--start-ms", type=int, required=True)
    p.add_argument("--slots", type=int, required=True)
    p.add_argument("--mapping")
    p.add_argument("--crop", type=int, nargs=4, metavar=("R0", "R1", "C0", "C1"))
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")
    p.add_argument("--format", choices=("lcst", "csv"), default="lcst")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit a model on a frame file")
    common(p)
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--train-length", type=int, default=None)
    p.add_argument("--cell", type=int, nargs=2, default=None, metavar=("ROW", "COL"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--streams", type=int, default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="stream a frame file through a trained model")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--algo", choices=("flsp", "rolling"), default="flsp")
    p.add_argument("--buffer", type=int, default=None, help="rolling buffer in feed batches (default: whole history)")
    p.add_argument("--mode", choices=("sync", "async"), default="sync")
    p.add_argument("--seed-length", type=int, default=2000)
    p.add_argument("--feed", type=int, default=15)
    p.add_argument("--span", type=int, default=30)
    p.add_argument("--feeds", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run an experiment plan")
    p.add_argument("--config")
    p.add_argument("--plan", help="JSON experiment plan")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("complexity", help="closed-form cost report")
    common(p, out_required=False)
    _add_model_flags(p)
    p.add_argument("--batch", type=int, default=1, help="parallel streams whose state FLSP holds")
    p.add_argument("--buffer", type=int, default=None, help="rolling history b_f in raw samples")
    p.add_argument("--buffer-length", type=int, default=None, help="l_buff for the overhead ratio")
    p.add_argument("--feed", type=int, default=15)
    p.add_argument("--span", type=int, default=30)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--formulas", action="store_true", help="print the symbolic cost table and exit")
    p.set_defaults(func=cmd_complexity)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a flat JSON object")
    known = set(vars(args))
    bad = {k.replace("-", "_") for k in cfg} - known
    if bad:
        raise UsageError(f"unknown config keys: {', '.join(sorted(bad))}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    args = parser.parse_args(argv)
    env = os.environ.get("LIVECAST_SEED")
    explicit = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    if env is not None and not explicit and hasattr(args, "seed"):
        try:
            args.seed = int(env)
        except ValueError:
            raise UsageError(f"LIVECAST_SEED must be an integer, got {env!r}") from None
    for key in ("cnn_channels", "convlstm_channels", "crop", "cell"):
        if isinstance(getattr(args, key, None), list):
            setattr(args, key, tuple(getattr(args, key)))
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"livecast: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, neural.ConfigError, engine.CapabilityError) as exc:
        print(f"livecast: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError, container.ContainerError, KeyError) as exc:
        print(f"livecast: error: {exc}", file=sys.stderr)
        return 1
