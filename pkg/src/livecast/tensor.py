"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable wrappers around numpy arrays. Operations are plain
functions; when a :class:`Tape` is active they record a vector-Jacobian
product so :func:`backward` can replay them in reverse.

A leading batch axis is allowed on the recurrent and convolutional ops so
independent streams can share one forward pass. Broadcasting is otherwise
limited to trailing-suffix operands (bias add, per-sample maps over a batch).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "OpCounter", "ShapeError", "ConfigError", "NonFiniteError",
    "tensor", "matmul", "add", "sub", "mul", "hadamard", "scale", "sigmoid", "tanh",
    "relu", "elementwise", "conv2d_same", "concat", "split", "reshape", "sum_all",
    "mean_all", "spatial_mean", "mse_loss", "backward", "count_ops",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operator was configured with unsupported parameters."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class Tensor:
    """Immutable n-d array of doubles.

    Identity (not value) is used for hashing so tensors can key gradient maps.
    """

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr)
        arr.setflags(write=False)
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        _check_finite(arr)
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying values."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, _as_tensor(other))
    __sub__ = lambda self, other: sub(self, _as_tensor(other))
    __mul__ = lambda self, other: mul(self, _as_tensor(other))
    __matmul__ = lambda self, other: matmul(self, other)


def tensor(data, name: str | None = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray) -> None:
    # a single reduction is enough: any NaN/Inf propagates into the sum
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError("non-finite value produced")


# --------------------------------------------------------------------------
# recording

@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive ops executed while the tape is active.

    Use as a context manager; nested tapes are not supported.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if _state.tape is not None:
            raise RuntimeError("a tape is already recording in this context")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class OpCounter:
    """Tally of multiply-accumulates and other elementwise work."""

    macs: int = 0
    elementwise: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.macs + self.elementwise

    def add(self, op: str, macs: int = 0, elementwise: int = 0) -> None:
        self.macs += macs
        self.elementwise += elementwise
        self.by_op[op] = self.by_op.get(op, 0) + macs + elementwise


class _State:
    tape: Tape | None = None
    counter: OpCounter | None = None


_state = _State()


@contextlib.contextmanager
def count_ops():
    """Count work done by every op executed inside the block."""
    prev = _state.counter
    counter = OpCounter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _state.tape
    if tape is not None:
        tape.nodes.append(_Node(out, inputs, vjp))
    return out


def _count(op: str, macs: int = 0, elementwise: int = 0) -> None:
    if _state.counter is not None:
        _state.counter.add(op, macs, elementwise)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# --------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[m, k]`` and ``b[k, n]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    out = Tensor._wrap(A @ B)
    m, k = A.shape
    _count("matmul", macs=m * k * B.shape[1])
    return _record(out, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    _count("add", elementwise=out.size)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    _count("add", elementwise=out.size)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; ``b`` may be a trailing-suffix map."""
    _check_suffix(a, b, "mul")
    A, B = a.data, b.data
    out = Tensor._wrap(A * B)
    _count("mul", elementwise=out.size)
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Strict elementwise product of two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ {a.shape} vs {b.shape}")
    return mul(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * c)
    _count("mul", elementwise=out.size)
    return _record(out, (a,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# nonlinearities

def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = Tensor._wrap(s)
    _count("sigmoid", elementwise=out.size)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor._wrap(t)
    _count("tanh", elementwise=out.size)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor._wrap(np.where(mask, x.data, 0.0))
    _count("relu", elementwise=out.size)
    return _record(out, (x,), lambda g: (g * mask,))


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(x: Tensor, f: str) -> Tensor:
    try:
        fn = _ELEMENTWISE[f]
    except KeyError:
        raise ConfigError(f"unknown elementwise function {f!r}") from None
    return fn(x)


# --------------------------------------------------------------------------
# convolution

def conv2d_same(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    Parameters
    ----------
    x : Tensor
        ``[c_in, H, W]`` or batched ``[B, c_in, H, W]``.
    k : Tensor
        ``[c_out, c_in, ks, ks]`` with odd ``ks``.
    bias : Tensor
        ``[c_out]``.
    """
    if k.ndim != 4:
        raise ShapeError(f"conv2d_same: kernel must be 4-d, got {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if kh != kw:
        raise ConfigError("conv2d_same: kernel must be square")
    if kh % 2 == 0:
        raise ConfigError(f"conv2d_same: kernel size must be odd, got {kh}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d_same: bias shape {bias.shape} != ({c_out},)")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or x.shape[-3] != c_in:
        raise ShapeError(f"conv2d_same: input {x.shape} incompatible with kernel {k.shape}")
    X = x.data if batched else x.data[None]
    nb, _, h, w = X.shape
    r = kh // 2
    # im2col with rows (c_in, ky, kx) and columns (batch, y, x): one GEMM per call
    xp = np.zeros((c_in, nb, h + 2 * r, w + 2 * r))
    xp[:, :, r:r + h, r:r + w] = X.transpose(1, 0, 2, 3)
    cols = np.empty((c_in, kh, kw, nb, h, w))
    for a in range(kh):
        for b in range(kw):
            cols[:, a, b] = xp[:, :, a:a + h, b:b + w]
    cols = cols.reshape(c_in * kh * kw, nb * h * w)
    K = k.data.reshape(c_out, -1)
    y = K @ cols
    y += bias.data[:, None]
    y = y.reshape(c_out, nb, h, w).transpose(1, 0, 2, 3)
    out = Tensor._wrap(np.ascontiguousarray(y if batched else y[0]))
    _count("conv2d", macs=nb * h * w * kh * kw * c_in * c_out, elementwise=nb * c_out * h * w)

    def vjp(g):
        G = (g if batched else g[None]).transpose(1, 0, 2, 3).reshape(c_out, nb * h * w)
        gk = (G @ cols.T).reshape(k.shape)
        gb = G.sum(axis=1)
        gcols = (K.T @ G).reshape(c_in, kh, kw, nb, h, w)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a:a + h, b:b + w] += gcols[:, a, b]
        gx = gxp[:, :, r:r + h, r:r + w].transpose(1, 0, 2, 3)
        return (gx if batched else gx[0]), gk, gb

    return _record(out, (x, k, bias), vjp)


# --------------------------------------------------------------------------
# shape manipulation and reductions

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    arrays = [p.data for p in parts]
    try:
        out = Tensor._wrap(np.concatenate(arrays, axis=axis))
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [a.shape[axis] for a in arrays]
    bounds = np.cumsum(sizes)[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sections: int | Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into equal ``sections`` or the given sizes."""
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ShapeError(f"split: axis of length {n} not divisible by {sections}")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ShapeError(f"split: sizes {sizes} do not sum to {n}")
    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(x.data, bounds, axis=axis)
    outs = []
    start = 0
    for size, piece in zip(sizes, pieces):
        out = Tensor._wrap(np.ascontiguousarray(piece))
        lo = start

        def vjp(g, lo=lo, size=size):
            full = np.zeros(x.shape)
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(lo, lo + size)
            full[tuple(sl)] = g
            return (full,)

        outs.append(_record(out, (x,), vjp))
        start += size
    return outs


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = Tensor._wrap(x.data.reshape(shape).copy())
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.array(x.data.sum()))
    src = x.shape
    return _record(out, (x,), lambda g: (np.full(src, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor._wrap(np.array(x.data.mean()))
    src = x.shape
    return _record(out, (x,), lambda g: (np.full(src, float(g) / n),))


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool over the two trailing (spatial) axes."""
    h, w = x.shape[-2:]
    out = Tensor._wrap(x.data.mean(axis=(-2, -1)))
    src = x.shape
    return _record(out, (x,),
                   lambda g: (np.broadcast_to(g[..., None, None] / (h * w), src).copy(),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} vs {t.shape}")
    diff = pred.data - t
    out = Tensor._wrap(np.array(np.mean(diff * diff)))
    n = diff.size
    return _record(out, (pred,), lambda g: (g * 2.0 * diff / n,))


# --------------------------------------------------------------------------
# reverse pass

def backward(tape: Tape, loss: Tensor,
             params: Iterable[Tensor] | None = None):
    """Propagate d(loss) back through every node on ``tape``.

    Returns a dict mapping each reached tensor to its gradient, or, when
    ``params`` is given, a list of gradients aligned with ``params``
    (zeros for parameters the loss does not depend on).
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(inp)
            grads[inp] = gi if prev is None else prev + gi
    if params is None:
        return grads
    return [grads.get(p, np.zeros(p.shape)) for p in params]
