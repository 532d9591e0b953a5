"""Independent reference implementations used by the tests."""
from __future__ import annotations

import numpy as np

from livecast.tensor import Tape, Tensor, backward


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Worst elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


def check_op_grad(build, inputs: list[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps input tensors to a scalar tensor.
    """
    ts = [Tensor(x) for x in inputs]
    with Tape() as tape:
        loss = build(*ts)
    analytic = backward(tape, loss, ts)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(inputs[j]) for j in range(len(inputs))]
            return float(build(*args).data)
        worst = max(worst, rel_err(analytic[i], numeric_grad(f, x, eps)))
    return worst


def conv_loop(x, k, b):
    """Direct zero-padded 'same' convolution (cross-correlation) by nested loops."""
    c_in, H, W = x.shape
    c_out, _, kh, kw = k.shape
    r = kh // 2
    out = np.zeros((c_out, H, W))
    for o in range(c_out):
        for y in range(H):
            for xx in range(W):
                acc = b[o]
                for ci in range(c_in):
                    for a in range(kh):
                        for bb in range(kw):
                            yy, xc = y + a - r, xx + bb - r
                            if 0 <= yy < H and 0 <= xc < W:
                                acc += k[o, ci, a, bb] * x[ci, yy, xc]
                out[o, y, xx] = acc
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lstm_sequence(params: dict, n_layers: int, n_dense: int, xs: np.ndarray):
    """Plain-numpy unrolled LSTM-DenseNet over ``xs[T, d]`` (batch 1), gate order i, f, g, o."""
    hs = [np.zeros(params["lstm0.w_h"].shape[0]) for _ in range(n_layers)]
    cs = [np.zeros_like(h) for h in hs]
    outs = []
    for x in xs:
        inp = x
        for i in range(n_layers):
            z = inp @ params[f"lstm{i}.w_x"] + hs[i] @ params[f"lstm{i}.w_h"] + params[f"lstm{i}.b"]
            n = hs[i].size
            ig, fg, gg, og = sigmoid(z[:n]), sigmoid(z[n:2 * n]), np.tanh(z[2 * n:3 * n]), sigmoid(z[3 * n:])
            cs[i] = fg * cs[i] + ig * gg
            hs[i] = og * np.tanh(cs[i])
            inp = hs[i]
        feats = [inp]
        out = inp
        for j in range(n_dense):
            h = feats[0] if j == 0 else np.concatenate(feats)
            out = h @ params[f"dense{j}.w"] + params[f"dense{j}.b"]
            if j < n_dense - 1:
                out = np.maximum(out, 0.0)
                feats.append(out)
        outs.append(out)
    return np.array(outs)


def full_history_forecasts(ar, ma, intercept, history: np.ndarray, steps: int) -> np.ndarray:
    """Recompute the reduced-form recursion from scratch on ``history``.

    Residuals are one-step errors (zero until the lags are filled), then the
    forecast runs ``steps`` ahead with future residuals set to zero.
    """
    ar, ma = np.asarray(ar), np.asarray(ma)
    na, nm = ar.size, ma.size - 1
    y = list(history)
    a = []
    for t in range(len(y)):
        if t >= na and t >= nm:
            pred = intercept - sum(ar[i - 1] * y[t - i] for i in range(1, na + 1)) \
                + sum(ma[j] * a[t - j] for j in range(1, nm + 1))
            a.append(y[t] - pred)
        else:
            a.append(0.0)
    out = []
    for _ in range(steps):
        t = len(y)
        pred = intercept - sum(ar[i - 1] * y[t - i] for i in range(1, na + 1)) \
            + sum(ma[j] * a[t - j] for j in range(1, nm + 1))
        y.append(pred)
        a.append(0.0)
        out.append(pred)
    return np.array(out)


def convlstm_step_grad_error(seed: int) -> float:
    """Worst gradient error of one 2-layer ConvLSTM step.

    Covers every weight, the input frame and both layers' incoming (h, c).
    The loss touches the output frame and the top cell state.
    """
    from livecast.neural import ModelSpec, build_model
    from livecast.tensor import add, mse_loss

    spec = ModelSpec("convlstm", channels=2, height=4, width=4, convlstm_channels=(2, 2), cnn_channels=(2,))
    rng = np.random.default_rng(100 + seed)
    m = build_model(spec, seed=seed)
    names = list(m.params)
    state = [[rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))] for _ in range(2)]
    x = rng.normal(size=(1, 2, 4, 4))
    target = rng.normal(size=(1, 2, 4, 4))
    zeros = np.zeros((1, 2, 4, 4))

    def value(params, xin, st_):
        P = {n: Tensor(params[n]) for n in names}
        S = tuple((Tensor(h), Tensor(c)) for h, c in st_)
        y, new = m.forward(P, S, Tensor(xin))
        return float(np.mean((y.data - target) ** 2) + np.mean(new[1][1].data ** 2))

    P = {n: Tensor(m.params[n]) for n in names}
    S = tuple((Tensor(h), Tensor(c)) for h, c in state)
    X = Tensor(x)
    with Tape() as tape:
        y, new = m.forward(P, S, X)
        loss = add(mse_loss(y, target), mse_loss(new[1][1], zeros))
    leaves = [P[n] for n in names] + [X] + [t for pair in S for t in pair]
    grads = backward(tape, loss, leaves)

    worst = 0.0
    for i, n in enumerate(names):
        f = lambda v, n=n: value({**m.params, n: v}, x, state)
        worst = max(worst, rel_err(grads[i], numeric_grad(f, m.params[n])))
    worst = max(worst, rel_err(grads[len(names)], numeric_grad(lambda v: value(m.params, v, state), x)))
    for j in range(4):
        layer, part = divmod(j, 2)

        def f(v, layer=layer, part=part):
            st_ = [list(p) for p in state]
            st_[layer][part] = v
            return value(m.params, x, st_)
        worst = max(worst, rel_err(grads[len(names) + 1 + j], numeric_grad(f, state[layer][part])))
    return worst


SMALL_GRID = {
    "lstm": dict(hidden=8, lstm_layers=2, dense_layers=2),
    "cnn-lstm": dict(height=8, width=8, hidden=8, lstm_layers=2, dense_layers=2, cnn_channels=(4, 4)),
    "convlstm": dict(height=8, width=8, convlstm_channels=(4, 4), cnn_channels=(4, 3)),
}


def flsp_rolling_gap(arch: str, seed: int = 0, seed_length: int = 200, n_feeds: int = 20) -> float:
    """Max difference between FLSP and unbounded rolling forecasts on random data."""
    from livecast.engine import StreamConfig, make_session
    from livecast.neural import ModelSpec, build_model

    spec = ModelSpec.default(arch, **SMALL_GRID[arch])
    model = build_model(spec, seed=seed)
    cfg = StreamConfig(seed_length, 15, 30, None)
    data = np.random.default_rng(seed).normal(size=(seed_length + 15 * n_feeds,) + spec.frame_shape)
    feeds = [data[seed_length + 15 * k:seed_length + 15 * (k + 1)] for k in range(n_feeds)]
    a = list(make_session("flsp", model, cfg).run(data[:seed_length], feeds))
    b = list(make_session("rolling", model, cfg).run(data[:seed_length], feeds))
    assert [(r.step, r.slot, r.emitted) for r in a] == [(r.step, r.slot, r.emitted) for r in b]
    return max(float(np.max(np.abs(x.frame - y.frame))) for x, y in zip(a, b))
