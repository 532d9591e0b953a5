"""Closed-form cost model for predictors and online schedulers.

One multiply-accumulate counts as one FLOP. Closed forms leave out
additions and activations; ``instrumented_count`` includes them, so the two
agree up to a small constant factor.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction

from .engine import StreamConfig
from .neural import ModelSpec, NeuralPredictor, param_count as _neural_params
from .stats import SarimaOrder
from .tensor import OpCounter, count_ops

MODEL_NAMES = ("ARIMA", "SARIMA", "LSTM", "CNN-LSTM", "ConvLSTM")

# time complexity, rolling memory, FLSP memory
FORMULAS = {
    "ARIMA": (r"\mathcal{O}(p+q)", r"(p+q)+1", "-"),
    "SARIMA": (r"\mathcal{O}(p+q+P+Q)", r"(P+Q)m+(p+q)+1", "-"),
    "LSTM": (r"\mathcal{O}(L_{lstm}hN+L_Dh^2)", r"b_f\ c_0", r"2 L_{lstm}\ n_h n_{bs}"),
    "CNN-LSTM": (r"\mathcal{O}(\sum_{l=1}^{L_{cnn}} (k_l^2c_{l-1}c_{l}HW)+L_{lstm}hN+L_Dh^2)",
                 r"b_f\ c_0HW", r"2 L_{lstm}\ n_h n_{bs}"),
    "ConvLSTM": (r"\mathcal{O}(HW\sum_{l=1}^{L_{clstm}}(k_l^2c_{l-1}c_l))",
                 r"b_f\ c_0HW", r"2 n_{bs}\ HW\sum_{l=1}^{L_{clstm}} c_l"),
}


def model_name(model) -> str:
    if isinstance(model, SarimaOrder):
        return "SARIMA" if model.m > 1 and (model.P or model.D or model.Q) else "ARIMA"
    if isinstance(model, ModelSpec):
        return {"lstm": "LSTM", "cnn-lstm": "CNN-LSTM", "convlstm": "ConvLSTM"}[model.arch]
    raise TypeError(f"no cost model for {type(model).__name__}")


def _lstm_flops(spec: ModelSpec) -> int:
    h = spec.hidden
    n = max(h, spec.lstm_input_size)
    return spec.lstm_layers * h * n + spec.dense_layers * h * h


def _schedule(spec: ModelSpec, layers) -> list[int]:
    return [spec.channels, *layers]


def flops(model, *, simplified: bool = False) -> int:
    """Per-step FLOP estimate.

    For ConvLSTM the default is the form with the gate constants
    ``HW * sum(8 k^2 c_{l-1} c_l + 18 c_l)``; ``simplified=True`` drops them.
    """
    name = model_name(model)
    if name == "ARIMA":
        return model.p + model.q
    if name == "SARIMA":
        return model.p + model.q + model.P + model.Q
    spec = model
    hw = spec.height * spec.width
    k2 = spec.kernel ** 2
    if name == "LSTM":
        return _lstm_flops(spec)
    if name == "CNN-LSTM":
        c = _schedule(spec, spec.cnn_channels)
        conv = sum(k2 * c[i - 1] * c[i] * hw for i in range(1, len(c)))
        return conv + _lstm_flops(spec)
    c = _schedule(spec, spec.convlstm_channels)
    if simplified:
        return hw * sum(k2 * c[i - 1] * c[i] for i in range(1, len(c)))
    return hw * sum(8 * k2 * c[i - 1] * c[i] + 18 * c[i] for i in range(1, len(c)))


def overhead_fraction(config: StreamConfig | None = None, *, buffer: int | None = None,
                      feed: int | None = None, span: int | None = None) -> Fraction:
    if config is not None:
        buffer = config.buffer_length if buffer is None else buffer
        feed, span = config.feed_length, config.span
    if buffer is None or feed is None or span is None:
        raise ValueError("buffer, feed and span lengths are all required")
    if feed + span <= 0 or buffer < 0:
        raise ValueError("need l_f + S_p > 0 and l_buff >= 0")
    return Fraction(buffer + feed + span, feed + span)


def overhead_ratio(config: StreamConfig | None = None, **kw) -> float:
    """Rolling work divided by FLSP work per feed: ``(l_buff+l_f+S_p)/(l_f+S_p)``."""
    return float(overhead_fraction(config, **kw))


def memory(model, algorithm: str, *, batch: int = 1, buffer: int | None = None) -> int | None:
    """Memory cells the scheduler keeps between feeds.

    ``buffer`` is the rolling history length in raw slots (``b_f``), ``batch``
    the number of parallel streams whose state FLSP holds (``n_bs``).
    Statistical models keep their constant-size histories under either
    algorithm; FLSP does not apply to them and returns ``None``.
    """
    if algorithm not in ("flsp", "rolling"):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    name = model_name(model)
    if name in ("ARIMA", "SARIMA"):
        if algorithm == "flsp":
            return None
        o = model
        # ma_length already counts the lag-0 term, which supplies the +1
        return o.ar_length + o.ma_length
    spec = model
    hw = spec.height * spec.width
    if algorithm == "flsp":
        if name == "ConvLSTM":
            return 2 * batch * hw * sum(spec.convlstm_channels)
        return 2 * spec.lstm_layers * spec.hidden * batch
    if buffer is None:
        raise ValueError("rolling memory needs the buffer length b_f")
    return buffer * spec.channels * (1 if name == "LSTM" else hw)


def param_count(model) -> int:
    if isinstance(model, SarimaOrder):
        return model.n_coefficients + 1
    if isinstance(model, NeuralPredictor):
        return model.n_params
    return _neural_params(model)


def instrumented_count(model: NeuralPredictor, frame) -> OpCounter:
    """Run one step on ``frame`` with op counting; the model's state is left untouched."""
    saved = model.snapshot()
    try:
        with count_ops() as counter:
            model.step(frame)
    finally:
        model.restore(saved)
    return counter


@dataclass(frozen=True)
class CostReport:
    model: str
    flops: int
    flops_simplified: int
    params: int
    memory_flsp: int | None
    memory_rolling: int | None
    overhead_ratio: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def __post_init__(self):
        for k in ("flops", "flops_simplified", "params", "memory_flsp", "memory_rolling"):
            v = getattr(self, k)
            if v is not None and v < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.overhead_ratio is not None and self.overhead_ratio < 1:
            raise ValueError("overhead ratio must be >= 1")


def cost_report(model, *, batch: int = 1, buffer: int | None = None,
                config: StreamConfig | None = None) -> CostReport:
    ratio = None
    if config is not None and config.buffer_length is not None:
        ratio = overhead_ratio(config)
    simple = flops(model, simplified=True)
    return CostReport(
        model=model_name(model),
        flops=flops(model),
        flops_simplified=simple,
        params=param_count(model),
        memory_flsp=memory(model, "flsp", batch=batch),
        memory_rolling=memory(model, "rolling", batch=batch, buffer=buffer)
        if buffer is not None or isinstance(model, SarimaOrder) else None,
        overhead_ratio=ratio,
    )


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.2f}"
    return f"{v:,}"


def format_reports(reports: list[CostReport]) -> str:
    """Plain-text table: one row per model, measured quantities as columns."""
    head = ["Model", "Params", "FLOPs", "FLOPs (simplified)", "Memory rolling", "Memory FLSP", "Ratio"]
    rows = [[r.model, _fmt(r.params), _fmt(r.flops), _fmt(r.flops_simplified),
             _fmt(r.memory_rolling), _fmt(r.memory_flsp), _fmt(r.overhead_ratio)] for r in reports]
    return _grid(head, rows)


def formula_table() -> str:
    head = ["Model", "Time complexity", "Required memory by rolling alg.", "Required memory by FLSP alg."]
    return _grid(head, [[m, *FORMULAS[m]] for m in MODEL_NAMES])


def _grid(head, rows) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [line, "| " + " | ".join(h.ljust(w) for h, w in zip(head, widths)) + " |", line]
    out += ["| " + " | ".join(str(c).ljust(w) for c, w in zip(r, widths)) + " |" for r in rows]
    out.append(line)
    return "\n".join(out)
