"""Seasonal ARIMA fitting and constant-memory online forecasting.

Models are estimated with the two-stage Hannan-Rissanen regression and then
expanded into a single reduced-form recursion::

    y_t = c - sum_i Phi_i y_{t-i} + sum_j Theta_j a_{t-j} + a_t

where ``Phi`` absorbs the regular/seasonal AR and differencing polynomials and
``Theta`` the regular/seasonal MA polynomials. Streaming only needs the last
``len(Phi)`` observations and ``len(Theta)`` residuals.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter


class SeriesTooShortError(ValueError):
    pass


class CollinearityError(np.linalg.LinAlgError):
    pass


class HorizonError(ValueError):
    """Fresh data does not line up with outstanding forecasts."""


@dataclass(frozen=True)
class SarimaOrder:
    p: int = 0
    d: int = 0
    q: int = 0
    P: int = 0
    D: int = 0
    Q: int = 0
    m: int = 1

    def __post_init__(self):
        if min(self.p, self.d, self.q, self.P, self.D, self.Q) < 0:
            raise ValueError("orders must be non-negative")
        if self.m < 1:
            raise ValueError("seasonal period must be >= 1")
        if self.m == 1 and (self.P or self.D or self.Q):
            raise ValueError("seasonal terms need a period m > 1")

    @property
    def ar_length(self) -> int:
        return self.p + self.d + self.m * (self.P + self.D)

    @property
    def ma_length(self) -> int:
        return self.q + self.m * self.Q + 1

    @property
    def n_coefficients(self) -> int:
        return self.p + self.q + self.P + self.Q

    def __str__(self) -> str:
        base = f"({self.p},{self.d},{self.q})"
        if self.m > 1:
            base += f"({self.P},{self.D},{self.Q},{self.m})"
        return base


@dataclass(frozen=True)
class ReducedForm:
    """``ar`` holds Phi_1..Phi_n, ``ma`` holds Theta_0..Theta_k with Theta_0 = 1."""

    ar: np.ndarray
    ma: np.ndarray
    intercept: float = 0.0

    def __post_init__(self):
        ar = np.array(self.ar, dtype=np.float64).reshape(-1)
        ma = np.array(self.ma, dtype=np.float64).reshape(-1)
        if ma.size == 0 or ma[0] != 1.0:
            raise ValueError("MA polynomial must start with 1")
        ar.setflags(write=False)
        ma.setflags(write=False)
        object.__setattr__(self, "ar", ar)
        object.__setattr__(self, "ma", ma)
        object.__setattr__(self, "intercept", float(self.intercept))

    def predict(self, y_hist, a_hist) -> float:
        """One-step forecast; histories are oldest-first and at least as long as the lags."""
        val = self.intercept
        for i, phi in enumerate(self.ar, start=1):
            val -= phi * y_hist[-i]
        for j in range(1, self.ma.size):
            val += self.ma[j] * a_hist[-j]
        return val


@dataclass(frozen=True)
class SarimaCoefficients:
    ar: tuple[float, ...] = ()
    ma: tuple[float, ...] = ()
    seasonal_ar: tuple[float, ...] = ()
    seasonal_ma: tuple[float, ...] = ()


# --------------------------------------------------------------------------
# differencing

def _operators(d: int, D: int, m: int) -> list[int]:
    return [m] * D + [1] * d


def difference(series, d: int = 0, D: int = 0, m: int = 1) -> np.ndarray:
    """Apply ``(1-B^m)^D`` then ``(1-B)^d``."""
    x = np.asarray(series, dtype=np.float64)
    if len(x) <= d + D * m:
        raise SeriesTooShortError(f"need more than {d + D * m} values, got {len(x)}")
    for lag in _operators(d, D, m):
        x = x[lag:] - x[:-lag]
    return x


def integrate(diffed, initial, d: int = 0, D: int = 0, m: int = 1) -> np.ndarray:
    """Invert :func:`difference` given the first ``d + D*m`` original values."""
    initial = np.asarray(initial, dtype=np.float64)
    ops = _operators(d, D, m)
    if len(initial) != sum(ops):
        raise ValueError(f"need exactly {sum(ops)} initial values, got {len(initial)}")
    prefixes = [initial]
    for lag in ops[:-1]:
        prev = prefixes[-1]
        prefixes.append(prev[lag:] - prev[:-lag])
    y = np.asarray(diffed, dtype=np.float64)
    for lag, prefix in zip(reversed(ops), reversed(prefixes)):
        x = np.empty(len(y) + lag)
        x[:lag] = prefix[:lag]
        for t in range(lag, len(x)):
            x[t] = x[t - lag] + y[t - lag]
        y = x
    return y


# --------------------------------------------------------------------------
# estimation

def _lagged(z: np.ndarray, lags: list[int], start: int) -> np.ndarray:
    n = len(z)
    return np.column_stack([z[start - lag:n - lag] for lag in lags]) if lags else np.empty((n - start, 0))


def long_ar_order(order: SarimaOrder) -> int:
    return max(20, 2 * (order.p + order.q) + order.m * (order.P + order.Q))


def _filter(poly: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``poly(B) x`` with the first ``len(poly)-1`` (incomplete) values left at zero."""
    out = np.convolve(x, poly)[:len(x)]
    out[:len(poly) - 1] = 0.0
    return out


def _regress(target: np.ndarray, columns: list[np.ndarray]) -> np.ndarray:
    X = np.column_stack(columns)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise CollinearityError("regression matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    return coef


def hannan_rissanen(z: np.ndarray, order: SarimaOrder, *, max_iter: int = 50,
                    tol: float = 1e-10) -> SarimaCoefficients:
    """Two-stage least squares on a zero-mean stationary series.

    Stage one fits a long autoregression whose residuals stand in for the
    innovations. Stage two regresses on lagged values and lagged residuals;
    seasonal terms sit at lags ``m*j``. When both regular and seasonal terms
    are present the product structure is kept by alternating two linear
    regressions: the regular terms on seasonally filtered data, then the
    seasonal terms on regularly filtered data.
    """
    o = order
    n = len(z)
    if not (o.p or o.q or o.P or o.Q):
        return SarimaCoefficients()
    if o.q or o.Q:
        k = long_ar_order(o)
        if n <= 2 * k:
            raise SeriesTooShortError(f"long autoregression of order {k} needs more than {2 * k} values")
        X = _lagged(z, list(range(1, k + 1)), k)
        beta, *_ = np.linalg.lstsq(X, z[k:], rcond=None)
        e = np.zeros(n)
        e[k:] = z[k:] - X @ beta
    else:
        k = 0
        e = np.zeros(n)
    start = k + max(o.p, o.q) + o.m * max(o.P, o.Q)
    if n - start <= o.n_coefficients:
        raise SeriesTooShortError("not enough rows for the second-stage regression")
    rows = slice(start, n)

    def step(x, r, n_ar, n_ma, lag):
        # solve x_t - r_t = sum a_i x_{t-lag*i} + sum b_j r_{t-lag*j}
        cols = [x[start - lag * i:n - lag * i] for i in range(1, n_ar + 1)]
        cols += [r[start - lag * j:n - lag * j] for j in range(1, n_ma + 1)]
        if not cols:
            return np.zeros(0), np.zeros(0)
        c = _regress(x[rows] - r[rows], cols)
        return c[:n_ar], c[n_ar:]

    def second_stage(e):
        ar, ma = np.zeros(o.p), np.zeros(o.q)
        sar, sma = np.zeros(o.P), np.zeros(o.Q)
        both = (o.p or o.q) and (o.P or o.Q)
        for _ in range(max_iter if both else 1):
            prev = np.concatenate([ar, ma, sar, sma])
            if o.p or o.q:
                u = _filter(_lag_poly(sar, o.m, -1.0), z)
                w = _filter(_lag_poly(sma, o.m, 1.0), e)
                ar, ma = step(u, w, o.p, o.q, 1)
            if o.P or o.Q:
                u = _filter(_lag_poly(ar, 1, -1.0), z)
                w = _filter(_lag_poly(ma, 1, 1.0), e)
                sar, sma = step(u, w, o.P, o.Q, o.m)
            if np.max(np.abs(np.concatenate([ar, ma, sar, sma]) - prev)) < tol:
                break
        return SarimaCoefficients(ar=tuple(ar), ma=tuple(ma), seasonal_ar=tuple(sar), seasonal_ma=tuple(sma))

    return second_stage(e)


def _lag_poly(coefs, lag: int, sign: float) -> np.ndarray:
    poly = np.zeros(lag * len(coefs) + 1)
    poly[0] = 1.0
    for j, c in enumerate(coefs, start=1):
        poly[lag * j] = sign * c
    return poly


def expand_reduced_form(coefs: SarimaCoefficients, order: SarimaOrder,
                        mean: float = 0.0) -> ReducedForm:
    """Multiply out the AR/MA lag polynomials into a single recursion.

    ``mean`` is the mean of the differenced series; it enters the intercept
    scaled by the stationary AR polynomials evaluated at B = 1.
    """
    o = order
    phi = _lag_poly(coefs.ar, 1, -1.0)
    sphi = _lag_poly(coefs.seasonal_ar, o.m, -1.0)
    full_ar = np.convolve(phi, sphi)
    for lag in _operators(o.d, o.D, o.m):
        diff = np.zeros(lag + 1)
        diff[0], diff[lag] = 1.0, -1.0
        full_ar = np.convolve(full_ar, diff)
    full_ma = np.convolve(_lag_poly(coefs.ma, 1, 1.0), _lag_poly(coefs.seasonal_ma, o.m, 1.0))
    intercept = mean * phi.sum() * sphi.sum()
    return ReducedForm(ar=full_ar[1:], ma=full_ma, intercept=intercept)


def _root_warnings(coefs: SarimaCoefficients, order: SarimaOrder) -> None:
    checks = [("AR", _lag_poly(coefs.ar, 1, -1.0)), ("seasonal AR", _lag_poly(coefs.seasonal_ar, order.m, -1.0)),
              ("MA", _lag_poly(coefs.ma, 1, 1.0)), ("seasonal MA", _lag_poly(coefs.seasonal_ma, order.m, 1.0))]
    for label, poly in checks:
        if len(poly) < 2:
            continue
        roots = np.roots(poly[::-1])
        if roots.size and np.min(np.abs(roots)) <= 1.0:
            kind = "stationary" if "AR" in label and "MA" not in label else "invertible"
            warnings.warn(f"fitted {label} polynomial is not {kind}", RuntimeWarning, stacklevel=3)


@dataclass(frozen=True)
class SarimaModel:
    order: SarimaOrder
    coefficients: SarimaCoefficients
    reduced: ReducedForm
    mean: float

    def to_dict(self) -> dict:
        o = self.order
        return {
            "order": {"p": o.p, "d": o.d, "q": o.q, "P": o.P, "D": o.D, "Q": o.Q, "m": o.m},
            "coefficients": {k: list(v) for k, v in vars(self.coefficients).items()},
            "reduced_form": {"ar": self.reduced.ar.tolist(), "ma": self.reduced.ma.tolist(),
                             "intercept": self.reduced.intercept},
            "mean": self.mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SarimaModel":
        c = d["coefficients"]
        rf = d["reduced_form"]
        return cls(
            order=SarimaOrder(**d["order"]),
            coefficients=SarimaCoefficients(**{k: tuple(v) for k, v in c.items()}),
            reduced=ReducedForm(rf["ar"], rf["ma"], rf["intercept"]),
            mean=float(d["mean"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SarimaModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def invert_ma(theta) -> tuple[float, ...]:
    """Reflect roots of ``1 + sum theta_j B^j`` that lie on or inside the unit circle.

    The reflected polynomial has the same autocovariances, so the fit is
    unchanged in distribution but its residual recursion no longer blows up.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size == 0 or not theta.any():
        return tuple(theta)
    poly = np.concatenate([[1.0], theta])
    # trailing zero coefficients are not roots; keep degree stable
    deg = int(np.max(np.nonzero(poly)[0]))
    roots = np.roots(poly[:deg + 1][::-1])
    small = np.abs(roots) <= 1.0
    if not small.any():
        return tuple(theta)
    # unit roots are pushed just outside the circle
    push = np.where(np.abs(roots) == 1.0, 1.0 + 1e-6, 1.0)
    roots = np.where(small, push / np.conj(roots), roots)
    new = np.real(np.poly(roots))[::-1]
    new = new / new[0]
    out = np.zeros_like(theta)
    out[:deg] = new[1:]
    return tuple(out)


def _pack(c: SarimaCoefficients) -> np.ndarray:
    return np.array([*c.ar, *c.ma, *c.seasonal_ar, *c.seasonal_ma], dtype=np.float64)


def _unpack(v, o: SarimaOrder) -> SarimaCoefficients:
    i = np.cumsum([0, o.p, o.q, o.P, o.Q])
    return SarimaCoefficients(*(tuple(v[i[k]:i[k + 1]]) for k in range(4)))


def css_residuals(z: np.ndarray, coefs: SarimaCoefficients, order: SarimaOrder) -> np.ndarray:
    """Innovations ``phi(B) Phi(B^m) z / (theta(B) Theta(B^m))`` started from zero."""
    ar = np.convolve(_lag_poly(coefs.ar, 1, -1.0), _lag_poly(coefs.seasonal_ar, order.m, -1.0))
    ma = np.convolve(_lag_poly(coefs.ma, 1, 1.0), _lag_poly(coefs.seasonal_ma, order.m, 1.0))
    return lfilter(ar, ma, z)


def css_polish(z: np.ndarray, coefs: SarimaCoefficients, order: SarimaOrder,
               burn_in: int | None = None) -> SarimaCoefficients:
    """Refine estimates by conditional least squares, starting from ``coefs``.

    Kept only when it lowers the residual sum of squares after ``burn_in``.
    """
    o = order
    if burn_in is None:
        burn_in = o.p + o.q + o.m * (o.P + o.Q)
    if o.n_coefficients == 0 or len(z) <= burn_in + o.n_coefficients:
        return coefs

    def resid(v):
        c = _invertible(_unpack(v, o))
        e = css_residuals(z, c, o)[burn_in:]
        return e if np.isfinite(e).all() else np.full_like(e, 1e150)

    x0 = _pack(_invertible(coefs))
    best, best_cost = coefs, 0.5 * float(resid(x0) @ resid(x0))
    starts = [x0]
    if o.P:
        # strongly periodic series often sit near a unit seasonal root, which a
        # local search from a weak seasonal start can miss
        alt = x0.copy()
        alt[o.p + o.q] = 0.9
        starts.append(alt)
    for start in starts:
        sol = least_squares(resid, start, method="lm")
        if np.isfinite(sol.cost) and sol.cost < best_cost:
            best, best_cost = _invertible(_unpack(sol.x, o)), sol.cost
    return best


def _invertible(coefs: SarimaCoefficients) -> SarimaCoefficients:
    return dataclasses.replace(coefs, ma=invert_ma(coefs.ma), seasonal_ma=invert_ma(coefs.seasonal_ma))


def fit(series, order: SarimaOrder, *, invertible: bool = True, polish: bool = True) -> SarimaModel:
    """Estimate a (seasonal) ARIMA model by Hannan-Rissanen.

    With ``invertible`` (the default) MA roots inside the unit circle are
    reflected outward after the warning is issued. With ``polish`` the
    two-stage estimate seeds a conditional least-squares refinement.
    """
    x = np.asarray(series, dtype=np.float64)
    min_len = 10 * (order.n_coefficients + 1)
    if len(x) < min_len:
        raise SeriesTooShortError(f"need at least {min_len} values, got {len(x)}")
    w = difference(x, order.d, order.D, order.m)
    mean = float(w.mean())
    coefs = hannan_rissanen(w - mean, order)
    _root_warnings(coefs, order)
    if invertible:
        coefs = _invertible(coefs)
    if polish:
        coefs = css_polish(w - mean, coefs, order)
    return SarimaModel(order, coefs, expand_reduced_form(coefs, order, mean), mean)


# --------------------------------------------------------------------------
# streaming state

@dataclass
class StatState:
    """Fixed-capacity observation and residual histories plus open forecasts."""

    y: deque
    a: deque
    pending: list[float] = field(default_factory=list)

    @classmethod
    def empty(cls, rf: ReducedForm) -> "StatState":
        return cls(deque(maxlen=rf.ar.size), deque(maxlen=rf.ma.size))

    @property
    def memory(self) -> int:
        return len(self.y) + len(self.a)

    def copy(self) -> "StatState":
        return StatState(deque(self.y, maxlen=self.y.maxlen), deque(self.a, maxlen=self.a.maxlen),
                         list(self.pending))


def _ready(state: StatState, rf: ReducedForm) -> bool:
    return len(state.y) >= rf.ar.size and len(state.a) >= rf.ma.size - 1


def observe(state: StatState, rf: ReducedForm, value: float) -> float:
    """Commit one actual value; returns its residual (0 during warm-up)."""
    value = float(value)
    resid = value - rf.predict(state.y, state.a) if _ready(state, rf) else 0.0
    state.y.append(value)
    state.a.append(resid)
    return resid


def seed_state(rf: ReducedForm, seed) -> StatState:
    state = StatState.empty(rf)
    for v in np.asarray(seed, dtype=np.float64):
        observe(state, rf, v)
    return state


def forecast_step(state: StatState, rf: ReducedForm) -> float:
    """Forecast the next open slot with all unseen residuals set to zero."""
    if not _ready(state, rf):
        raise ValueError("state histories are not yet full")
    if state.pending:
        k = len(state.pending)
        y_hist = list(state.y) + state.pending
        a_hist = list(state.a) + [0.0] * k
    else:
        y_hist, a_hist = state.y, state.a
    yhat = rf.predict(y_hist, a_hist)
    state.pending.append(yhat)
    return yhat


def forecast(state: StatState, rf: ReducedForm, steps: int) -> np.ndarray:
    return np.array([forecast_step(state, rf) for _ in range(steps)])


def online_update(state: StatState, rf: ReducedForm, fresh) -> StatState:
    """Replace the earliest open forecasts with observations.

    Residuals are recomputed one step at a time against the corrected
    history, so the result matches a full-history recursion exactly. Any
    forecasts still open afterwards are stale and are dropped.
    """
    fresh = np.asarray(fresh, dtype=np.float64).reshape(-1)
    if fresh.size == 0:
        return state
    if fresh.size > len(state.pending):
        raise HorizonError(f"{fresh.size} fresh values but only {len(state.pending)} open forecasts")
    for v in fresh:
        observe(state, rf, v)
    state.pending.clear()
    return state


class StatPredictor:
    """Per-series statistical forecaster driven by the online procedure.

    It keeps only the reduced-form histories, so it has no recurrent state to
    snapshot and cannot be used with the FLSP scheduler.
    """

    supports_state = False

    def __init__(self, model: SarimaModel):
        self.model = model
        self.state: StatState | None = None

    @classmethod
    def fit_seed(cls, seed, order: SarimaOrder) -> "StatPredictor":
        pred = cls(fit(seed, order))
        pred.start(seed)
        return pred

    @property
    def reduced(self) -> ReducedForm:
        return self.model.reduced

    def start(self, seed) -> None:
        self.state = seed_state(self.reduced, seed)

    def forecast(self, steps: int) -> np.ndarray:
        self.state.pending.clear()
        return forecast(self.state, self.reduced, steps)

    def update(self, fresh) -> None:
        online_update(self.state, self.reduced, fresh)


class StatBank:
    """Independent :class:`StatPredictor` per series for multi-channel or grid input.

    Frames of any trailing shape are flattened into series; forecasts come
    back in the same shape.
    """

    supports_state = False

    def __init__(self, predictors: list[StatPredictor], shape: tuple[int, ...]):
        if len(predictors) != int(np.prod(shape, dtype=int)):
            raise ValueError("one predictor per series is required")
        self.predictors = predictors
        self.shape = tuple(shape)

    @classmethod
    def fit_seed(cls, seed, order: SarimaOrder) -> "StatBank":
        seed = np.asarray(seed, dtype=np.float64)
        shape = seed.shape[1:]
        flat = seed.reshape(len(seed), -1)
        return cls([StatPredictor.fit_seed(flat[:, i], order) for i in range(flat.shape[1])], shape)

    def start(self, seed) -> None:
        flat = np.asarray(seed, dtype=np.float64).reshape(len(seed), -1)
        for i, p in enumerate(self.predictors):
            p.start(flat[:, i])

    def forecast(self, steps: int) -> np.ndarray:
        out = np.stack([p.forecast(steps) for p in self.predictors], axis=1)
        return out.reshape((steps,) + self.shape)

    def update(self, fresh) -> None:
        fresh = np.asarray(fresh, dtype=np.float64)
        flat = fresh.reshape(len(fresh), -1)
        for i, p in enumerate(self.predictors):
            p.update(flat[:, i])

    @property
    def memory(self) -> int:
        return sum(p.state.memory for p in self.predictors if p.state is not None)
