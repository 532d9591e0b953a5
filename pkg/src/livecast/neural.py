"""Stateful neural forecasters: LSTM-DenseNet, CNN-LSTM and ConvLSTM-CNN.

Every model advances one slot per :meth:`NeuralPredictor.step` call and
returns its estimate of the next frame. The recurrent state can be captured
with :meth:`snapshot` and put back with :meth:`restore`, which is what the
FLSP scheduler relies on.

Frames are channel-first: ``[C]`` for the single-cell LSTM and ``[C, H, W]``
for the grid models. A leading batch axis runs independent streams together.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .tensor import (
    ConfigError, NonFiniteError, ShapeError, Tape, Tensor, add, backward, concat,
    conv2d_same, matmul, mse_loss, mul, relu, reshape, scale, sigmoid, spatial_mean,
    split, tanh,
)

logger = logging.getLogger(__name__)

ARCHS = ("lstm", "cnn-lstm", "convlstm")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description shared by the three model families.

    ``cnn_channels`` is the CNN section: the encoder for ``cnn-lstm`` and the
    output head for ``convlstm`` (whose last entry must equal ``channels``).
    """

    arch: str = "convlstm"
    channels: int = 3
    height: int = 8
    width: int = 8
    hidden: int = 64
    lstm_layers: int = 2
    dense_layers: int = 2
    cnn_channels: tuple[int, ...] = (8, 3)
    convlstm_channels: tuple[int, ...] = (8, 8)
    kernel: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        object.__setattr__(self, "convlstm_channels", tuple(int(c) for c in self.convlstm_channels))
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel}")
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError("channels and grid dims must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.arch in ("lstm", "cnn-lstm"):
            if self.hidden < 1 or self.lstm_layers < 1 or self.dense_layers < 1:
                raise ConfigError("hidden size and layer counts must be positive")
        if self.arch == "cnn-lstm" and not self.cnn_channels:
            raise ConfigError("cnn-lstm needs at least one encoder layer")
        if self.arch == "convlstm":
            if not self.convlstm_channels or not self.cnn_channels:
                raise ConfigError("convlstm needs ConvLSTM layers and a CNN head")
            if self.cnn_channels[-1] != self.channels:
                raise ConfigError("last head layer must output the input channel count")

    @classmethod
    def default(cls, arch: str, **overrides) -> "ModelSpec":
        base = {"lstm": {}, "cnn-lstm": {"cnn_channels": (8, 8)}, "convlstm": {}}[arch]
        return cls(arch=arch, **{**base, **overrides})

    @property
    def frame_shape(self) -> tuple[int, ...]:
        if self.arch == "lstm":
            return (self.channels,)
        return (self.channels, self.height, self.width)

    @property
    def lstm_input_size(self) -> int:
        """Feature size ``d`` fed to the first LSTM layer."""
        if self.arch == "lstm":
            return self.channels
        if self.arch == "cnn-lstm":
            return self.channels + sum(self.cnn_channels)
        return 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for ``spec``."""
    shapes: dict[str, tuple[int, ...]] = {}
    k = spec.kernel
    if spec.arch == "cnn-lstm":
        c_in = spec.channels
        for i, c in enumerate(spec.cnn_channels):
            shapes[f"enc{i}.k"] = (c, c_in, k, k)
            shapes[f"enc{i}.b"] = (c,)
            c_in += c
    if spec.arch in ("lstm", "cnn-lstm"):
        n = spec.hidden
        d = spec.lstm_input_size
        for i in range(spec.lstm_layers):
            shapes[f"lstm{i}.w_x"] = (d if i == 0 else n, 4 * n)
            shapes[f"lstm{i}.w_h"] = (n, 4 * n)
            shapes[f"lstm{i}.b"] = (4 * n,)
        out_dim = spec.channels * (1 if spec.arch == "lstm" else spec.height * spec.width)
        for j in range(spec.dense_layers):
            width = out_dim if j == spec.dense_layers - 1 else n
            shapes[f"dense{j}.w"] = (n * (j + 1), width)
            shapes[f"dense{j}.b"] = (width,)
    else:
        c_in = spec.channels
        hw = (spec.height, spec.width)
        for i, c in enumerate(spec.convlstm_channels):
            shapes[f"clstm{i}.w"] = (4 * c, c_in + c, k, k)
            shapes[f"clstm{i}.b"] = (4 * c,)
            for gate in ("ci", "cf", "co"):
                shapes[f"clstm{i}.w_{gate}"] = (c,) + hw
            c_in += c
        h_in = spec.convlstm_channels[-1]
        for j, c in enumerate(spec.cnn_channels):
            shapes[f"head{j}.k"] = (c, h_in, k, k)
            shapes[f"head{j}.b"] = (c,)
            h_in += c
    return shapes


def init_params(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        layer, kind = name.split(".")
        if kind in ("w_x", "w_h", "b") and layer.startswith("lstm"):
            fan_in = spec.hidden
        elif kind in ("k", "w") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        elif kind == "w":
            fan_in = shape[0]
        elif kind.startswith("w_c"):
            fan_in = shape[0] * spec.kernel ** 2
        else:
            fan_in = max(1, _fan_in_for_bias(name, params))
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _fan_in_for_bias(name: str, params: dict[str, np.ndarray]) -> int:
    layer = name.split(".")[0]
    for key in (f"{layer}.w", f"{layer}.k"):
        if key in params:
            w = params[key]
            return int(np.prod(w.shape[1:])) if w.ndim == 4 else w.shape[0]
    return 1


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


@dataclass(frozen=True)
class NeuralState:
    """Recurrent state: one ``(h, c)`` pair per LSTM/ConvLSTM layer.

    ``layers is None`` stands for the initial all-zero state.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...] | None = None

    @property
    def size(self) -> int:
        if self.layers is None:
            return 0
        return sum(h.size + c.size for h, c in self.layers)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (h, c) in enumerate(self.layers or ()):
            out[f"layer{i}.h"] = h
            out[f"layer{i}.c"] = c
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "NeuralState":
        n = len(arrays) // 2
        if n == 0:
            return cls(None)
        layers = []
        for i in range(n):
            h = np.array(arrays[f"layer{i}.h"], dtype=np.float64)
            c = np.array(arrays[f"layer{i}.c"], dtype=np.float64)
            h.setflags(write=False)
            c.setflags(write=False)
            layers.append((h, c))
        return cls(tuple(layers))


# --------------------------------------------------------------------------
# cells

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM layer update on a batch ``x[B, d]``; gate order i, f, g, o."""
    z = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    zi, zf, zg, zo = split(z, 4, axis=1)
    i, f, o = sigmoid(zi), sigmoid(zf), sigmoid(zo)
    c_new = add(mul(f, c), mul(i, tanh(zg)))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def convlstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor,
                  w_ci: Tensor, w_cf: Tensor, w_co: Tensor, *, return_gates: bool = False):
    """ConvLSTM update with peepholes on ``x[B, c_in, H, W]``.

    ``w`` stacks the input and hidden kernels of the four gates: output
    channels are ordered i, f, c, o and input channels are ``[x, h]``, so one
    convolution of the concatenation equals ``W_x* X + W_h* H``.
    """
    z = conv2d_same(concat([x, h], axis=1), w, b)
    zi, zf, zc, zo = split(z, 4, axis=1)
    i = sigmoid(add(zi, mul(c, w_ci)))
    f = sigmoid(add(zf, mul(c, w_cf)))
    c_new = add(mul(f, c), mul(i, tanh(zc)))
    o = sigmoid(add(zo, mul(c_new, w_co)))
    h_new = mul(o, tanh(c_new))
    if return_gates:
        return h_new, c_new, {"i": i, "f": f, "o": o}
    return h_new, c_new


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor._wrap(mask))


def _dense_head(P, prefix: str, n_layers: int, h: Tensor) -> Tensor:
    feats = [h]
    out = h
    for j in range(n_layers):
        inp = feats[0] if j == 0 else concat(feats, axis=1)
        out = add(matmul(inp, P[f"{prefix}{j}.w"]), P[f"{prefix}{j}.b"])
        if j < n_layers - 1:
            out = relu(out)
            feats.append(out)
    return out


def _lstm_stack(spec, P, state, x, rate, rng):
    new_state = []
    inp = x
    for i in range(spec.lstm_layers):
        h, c = state[i]
        h, c = lstm_cell(inp, h, c, P[f"lstm{i}.w_x"], P[f"lstm{i}.w_h"], P[f"lstm{i}.b"])
        new_state.append((h, c))
        inp = _dropout(h, rate, rng)
    return inp, tuple(new_state)


def lstm_step(spec: ModelSpec, P, state, x: Tensor, *, rate: float = 0.0, rng=None):
    """LSTM stack followed by the DenseNet head; ``x`` is ``[B, C]``."""
    top, new_state = _lstm_stack(spec, P, state, x, rate, rng)
    return _dense_head(P, "dense", spec.dense_layers, top), new_state


def encode(spec: ModelSpec, P, x: Tensor) -> Tensor:
    """CNN DenseNet encoder of the CNN-LSTM, pooled to ``[B, d]``."""
    feats = [x]
    for i in range(len(spec.cnn_channels)):
        inp = feats[0] if i == 0 else concat(feats, axis=1)
        feats.append(relu(conv2d_same(inp, P[f"enc{i}.k"], P[f"enc{i}.b"])))
    return spatial_mean(concat(feats, axis=1))


def cnn_lstm_step(spec: ModelSpec, P, state, x: Tensor, *, rate: float = 0.0, rng=None):
    feat = encode(spec, P, x)
    top, new_state = _lstm_stack(spec, P, state, feat, rate, rng)
    flat = _dense_head(P, "dense", spec.dense_layers, top)
    return reshape(flat, (x.shape[0],) + spec.frame_shape), new_state


def convlstm_step(spec: ModelSpec, P, state, x: Tensor, *, rate: float = 0.0, rng=None):
    """Dense ConvLSTM block, then a dense CNN head on the last hidden map."""
    feats = [x]
    new_state = []
    for i in range(len(spec.convlstm_channels)):
        inp = feats[0] if i == 0 else concat(feats, axis=1)
        h, c = state[i]
        h, c = convlstm_cell(inp, h, c, P[f"clstm{i}.w"], P[f"clstm{i}.b"],
                             P[f"clstm{i}.w_ci"], P[f"clstm{i}.w_cf"], P[f"clstm{i}.w_co"])
        new_state.append((h, c))
        feats.append(_dropout(h, rate, rng))
    hfeats = [feats[-1]]
    n_head = len(spec.cnn_channels)
    out = feats[-1]
    for j in range(n_head):
        inp = hfeats[0] if j == 0 else concat(hfeats, axis=1)
        out = conv2d_same(inp, P[f"head{j}.k"], P[f"head{j}.b"])
        if j < n_head - 1:
            out = relu(out)
            hfeats.append(out)
    return out, tuple(new_state)


_STEP = {"lstm": lstm_step, "cnn-lstm": cnn_lstm_step, "convlstm": convlstm_step}


# --------------------------------------------------------------------------
# predictor

class NeuralPredictor:
    """A model plus its live recurrent state."""

    supports_state = True

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.spec = spec
        shapes = param_shapes(spec)
        if params is None:
            params = init_params(spec, seed)
        missing = set(shapes) - set(params)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)}")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != shape:
                raise ShapeError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {n: np.array(params[n], dtype=np.float64) for n in shapes}
        self._tensors: dict[str, Tensor] | None = None
        self._state: tuple | None = None

    # -- parameters ------------------------------------------------------
    def param_tensors(self) -> dict[str, Tensor]:
        if self._tensors is None:
            self._tensors = {n: Tensor(v, name=n) for n, v in self.params.items()}
        return self._tensors

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for n, v in params.items():
            if self.params[n].shape != np.shape(v):
                raise ShapeError(f"parameter {n}: shape {np.shape(v)} != {self.params[n].shape}")
            self.params[n] = np.array(v, dtype=np.float64)
        self._tensors = None

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- state -----------------------------------------------------------
    def _layer_shapes(self) -> list[tuple[int, ...]]:
        s = self.spec
        if s.arch == "convlstm":
            return [(c, s.height, s.width) for c in s.convlstm_channels]
        return [(s.hidden,)] * s.lstm_layers

    def initial_state(self, batch: int) -> tuple:
        return tuple((Tensor(np.zeros((batch,) + shp)), Tensor(np.zeros((batch,) + shp)))
                     for shp in self._layer_shapes())

    def reset(self) -> None:
        self._state = None

    def snapshot(self) -> NeuralState:
        if self._state is None:
            return NeuralState(None)
        return NeuralState(tuple((h.data, c.data) for h, c in self._state))

    def restore(self, state: NeuralState) -> None:
        if state.layers is None:
            self._state = None
            return
        shapes = self._layer_shapes()
        if len(state.layers) != len(shapes):
            raise ShapeError(f"state has {len(state.layers)} layers, model has {len(shapes)}")
        batch = state.layers[0][0].shape[0]
        for (h, c), shp in zip(state.layers, shapes):
            if h.shape != (batch,) + shp or c.shape != (batch,) + shp:
                raise ShapeError(f"state layer shape {h.shape} does not match {(batch,) + shp}")
        self._state = tuple((Tensor._wrap(np.array(h)), Tensor._wrap(np.array(c)))
                            for h, c in state.layers)

    # -- stepping --------------------------------------------------------
    def forward(self, P, state, x: Tensor, *, rate: float = 0.0, rng=None):
        return _STEP[self.spec.arch](self.spec, P, state, x, rate=rate, rng=rng)

    def step(self, frame) -> np.ndarray:
        """Consume one frame (optionally batched); return the next-frame estimate."""
        x = np.asarray(frame, dtype=np.float64)
        fs = self.spec.frame_shape
        single = x.shape == fs
        if single:
            x = x[None]
        elif x.shape[1:] != fs:
            raise ShapeError(f"frame shape {x.shape} does not match model frame {fs}")
        state = self._state
        if state is None:
            state = self.initial_state(x.shape[0])
        elif state[0][0].shape[0] != x.shape[0]:
            raise ShapeError(f"batch {x.shape[0]} does not match state batch {state[0][0].shape[0]}")
        y, self._state = self.forward(self.param_tensors(), state, Tensor._wrap(x))
        return y.data[0] if single else y.data

    def run(self, frames) -> np.ndarray:
        """Step through ``frames`` and return the stacked outputs."""
        return np.stack([self.step(f) for f in frames])


def build_model(spec: ModelSpec, seed: int = 0, params=None) -> NeuralPredictor:
    return NeuralPredictor(spec, params=params, seed=seed)


def recursive_forecast(predictor, frame, steps: int) -> np.ndarray:
    """Feed ``frame`` and then each prediction back in, ``steps`` times."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = []
    x = frame
    for _ in range(steps):
        x = predictor.step(x)
        out.append(x)
    return np.stack(out)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def train(model: NeuralPredictor, series, epochs: int = 10, lr: float = 0.01,
          dropout: float | None = None, *, window: int = 24, streams: int = 4,
          clip: float = 5.0, optimizer: str = "sgd", seed: int = 0) -> TrainResult:
    """Teacher-forced next-step MSE training with truncated BPTT.

    ``series`` is ``[T, *frame_shape]``. It is cut into ``streams`` contiguous
    segments trained side by side as a batch; the recurrent state is carried
    across windows of ``window`` steps (gradients are not). Gradients are
    clipped to global norm ``clip``. ``optimizer`` is ``"sgd"`` (plain
    gradient descent) or ``"adam"``.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim < 1 or len(series) < 2:
        raise ValueError("series must contain at least two frames")
    fs = model.spec.frame_shape
    if series.shape[1:] != fs:
        raise ShapeError(f"series frames {series.shape[1:]} do not match model frame {fs}")
    if optimizer not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    rate = model.spec.dropout if dropout is None else dropout
    streams = max(1, min(streams, len(series) // 2))
    seg = len(series) // streams
    batch = series[:seg * streams].reshape((streams, seg) + fs).swapaxes(0, 1)
    rng = np.random.default_rng(seed)
    names = list(model.params)
    m = {n: np.zeros_like(v) for n, v in model.params.items()}
    v = {n: np.zeros_like(w) for n, w in model.params.items()}
    t_adam = 0
    result = TrainResult()
    for epoch in range(epochs):
        state = model.initial_state(streams)
        chunk_losses = []
        for start in range(0, seg - 1, window):
            stop = min(start + window, seg - 1)
            P = {n: Tensor(model.params[n]) for n in names}
            try:
                with Tape() as tape:
                    st = state
                    total = None
                    for t in range(start, stop):
                        y, st = model.forward(P, st, Tensor._wrap(batch[t]), rate=rate, rng=rng)
                        term = mse_loss(y, batch[t + 1])
                        total = term if total is None else add(total, term)
                    loss = scale(total, 1.0 / (stop - start))
                grads = backward(tape, loss, [P[n] for n in names])
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch)
            chunk_losses.append(value)
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if clip and norm > clip:
                grads = [g * (clip / norm) for g in grads]
            if optimizer == "sgd":
                for n, g in zip(names, grads):
                    model.params[n] = model.params[n] - lr * g
            else:
                t_adam += 1
                for n, g in zip(names, grads):
                    m[n] = 0.9 * m[n] + 0.1 * g
                    v[n] = 0.999 * v[n] + 0.001 * g * g
                    mh = m[n] / (1 - 0.9 ** t_adam)
                    vh = v[n] / (1 - 0.999 ** t_adam)
                    model.params[n] = model.params[n] - lr * mh / (np.sqrt(vh) + 1e-8)
            # detach: old tensors are not on the next tape
            state = tuple((Tensor._wrap(h.data), Tensor._wrap(c.data)) for h, c in st)
        model._tensors = None
        epoch_loss = float(np.mean(chunk_losses))
        result.losses.append(epoch_loss)
        logger.debug("epoch %d loss %.6g", epoch, epoch_loss)
    model.reset()
    return result


# --------------------------------------------------------------------------
# persistence

def save_model(model: NeuralPredictor, path, meta: dict | None = None) -> None:
    """Write weights; ``meta`` adds JSON-serialisable fields to the header."""
    container.save(path, model.params, {**(meta or {}), "kind": "model", "spec": model.spec.to_dict()})


def load_model(path) -> NeuralPredictor:
    arrays, meta = container.load(path)
    if meta.get("kind") != "model":
        raise container.ContainerError("file does not hold model weights")
    return NeuralPredictor(ModelSpec.from_dict(meta["spec"]), params=arrays)


def save_state(state: NeuralState, path) -> None:
    container.save(path, state.to_arrays(), {"kind": "state"})


def load_state(path) -> NeuralState:
    arrays, meta = container.load(path)
    if meta.get("kind") != "state":
        raise container.ContainerError("file does not hold a recurrent state")
    return NeuralState.from_arrays(arrays)
