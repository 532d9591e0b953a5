import json
import warnings

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import lfilter

from livecast import stats as S
from livecast.stats import (
    HorizonError, ReducedForm, SarimaCoefficients, SarimaModel, SarimaOrder, StatBank, StatPredictor,
    SeriesTooShortError, difference, expand_reduced_form, fit, forecast, forecast_step, hannan_rissanen,
    integrate, invert_ma, online_update, seed_state,
)

from oracles import full_history_forecasts


def simulate(ar_poly, ma_poly, n, seed, burn=2000, sigma=1.0):
    """ARMA sample from lag polynomials in ascending powers of B."""
    e = np.random.default_rng(seed).normal(0, sigma, n + burn)
    return lfilter(ma_poly, ar_poly, e)[burn:]


def test_order_lengths():
    o = SarimaOrder(1, 0, 1, 1, 0, 1, 144)
    assert (o.ar_length, o.ma_length, o.n_coefficients) == (145, 146, 4)
    assert str(o) == "(1,0,1)(1,0,1,144)"
    with pytest.raises(ValueError):
        SarimaOrder(1, 0, 0, 1, 0, 0, 1)
    with pytest.raises(ValueError):
        SarimaOrder(-1)


def test_difference_examples():
    np.testing.assert_array_equal(difference([1, 4, 9, 16, 25], d=1), [3, 5, 7, 9])
    np.testing.assert_array_equal(difference([1, 4, 9, 16, 25], d=2), [2, 2, 2])
    np.testing.assert_array_equal(difference([1, 2, 3, 11, 12, 13], D=1, m=3), [10, 10, 10])
    with pytest.raises(SeriesTooShortError):
        difference([1, 2], d=2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(12, 40), elements=st.floats(-1e3, 1e3)),
       st.integers(0, 2), st.integers(0, 1), st.sampled_from([2, 3, 4]))
def test_integrate_inverts_difference(x, d, D, m):
    k = d + D * m
    if len(x) <= k:
        return
    back = integrate(difference(x, d, D, m), x[:k], d, D, m)
    np.testing.assert_allclose(back, x, atol=1e-6 * (1 + np.abs(x).max()))


def test_reduced_form_lag_five_coefficient_matches_symbolic_product():
    phi, Phi, B = sp.symbols("phi Phi B")
    poly = sp.expand((1 - phi * B) * (1 - Phi * B ** 4))
    coeffs = sp.Poly(poly, B).all_coeffs()[::-1]
    for a, s_ in ((0.4, 0.7), (-0.3, 0.5), (0.9, -0.2)):
        rf = expand_reduced_form(SarimaCoefficients(ar=(a,), seasonal_ar=(s_,)), SarimaOrder(1, 0, 0, 1, 0, 0, 4))
        want = [float(c.subs({phi: a, Phi: s_})) for c in coeffs[1:]]
        np.testing.assert_allclose(rf.ar, want, atol=1e-15)
        # the one-step forecast weights y_{t-5} by -phi*Phi
        assert rf.ar[4] == pytest.approx(a * s_)


def test_reduced_form_includes_differencing_and_ma():
    B = sp.symbols("B")
    th, Th = 0.3, -0.4
    coefs = SarimaCoefficients(ar=(0.5,), ma=(th,), seasonal_ma=(Th,))
    rf = expand_reduced_form(coefs, SarimaOrder(1, 1, 1, 0, 1, 1, 3))
    ar = sp.Poly(sp.expand((1 - sp.Rational(1, 2) * B) * (1 - B) * (1 - B ** 3)), B).all_coeffs()[::-1]
    ma = sp.Poly(sp.expand((1 + sp.nsimplify(th) * B) * (1 + sp.nsimplify(Th) * B ** 3)), B).all_coeffs()[::-1]
    np.testing.assert_allclose(rf.ar, [float(c) for c in ar[1:]], atol=1e-15)
    np.testing.assert_allclose(rf.ma, [float(c) for c in ma], atol=1e-15)


def test_intercept_from_mean():
    rf = expand_reduced_form(SarimaCoefficients(ar=(0.5,)), SarimaOrder(1), mean=10.0)
    assert rf.intercept == pytest.approx(5.0)


def test_forecast_step_examples():
    rf = ReducedForm(ar=[-0.5], ma=[1.0], intercept=1.0)
    state = seed_state(rf, [2.0, 4.0])
    assert forecast_step(state, rf) == pytest.approx(3.0)
    assert forecast_step(state, rf) == pytest.approx(2.5)
    # MA(1): the last residual is carried into the first forecast only
    rf = ReducedForm(ar=[], ma=[1.0, 0.5])
    state = seed_state(rf, [1.0, 3.0])
    assert list(state.a) == [0.0, 3.0]
    np.testing.assert_allclose(forecast(state, rf, 3), [1.5, 0.0, 0.0])


def test_online_update_rejects_extra_values():
    rf = ReducedForm(ar=[-0.5], ma=[1.0])
    state = seed_state(rf, [1.0, 2.0])
    forecast(state, rf, 2)
    with pytest.raises(HorizonError):
        online_update(state, rf, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("order", [SarimaOrder(3, 0, 5), SarimaOrder(1, 0, 1, 1, 0, 1, 12),
                                   SarimaOrder(1, 1, 1)])
def test_streaming_matches_full_history_recomputation(order):
    rng = np.random.default_rng(11)
    t = np.arange(500)
    y = 10 + 3 * np.sin(2 * np.pi * t / 12) + rng.normal(size=500)
    model = fit(y[:300], order)
    rf = model.reduced
    seed_len, lf, sp_ = 300, 15, 30
    pred = StatPredictor(model)
    pred.start(y[:seed_len])
    got = [pred.forecast(sp_)]
    for k in range((500 - seed_len) // lf - 1):
        pred.update(y[seed_len + k * lf:seed_len + (k + 1) * lf])
        got.append(pred.forecast(sp_))
    for k, fc in enumerate(got):
        hist = y[:seed_len + k * lf]
        want = full_history_forecasts(rf.ar, rf.ma, rf.intercept, hist, sp_)
        assert np.max(np.abs(fc - want)) <= 1e-9


def test_state_memory_is_bounded():
    o = SarimaOrder(1, 0, 1, 1, 0, 1, 12)
    y = np.random.default_rng(0).normal(size=2000)
    pred = StatPredictor.fit_seed(y[:500], o)
    for k in range(50):
        pred.forecast(30)
        pred.update(y[500 + 15 * k:515 + 15 * k])
        assert pred.state.memory <= o.ar_length + o.ma_length


def test_hannan_rissanen_recovers_ar1():
    for phi in (0.3, 0.7, -0.5):
        z = simulate([1, -phi], [1], 10_000, seed=1)
        c = hannan_rissanen(z - z.mean(), SarimaOrder(1))
        assert abs(c.ar[0] - phi) < 0.05


def test_hannan_rissanen_recovers_seasonal_ar():
    Phi = 0.6
    ar = np.zeros(13)
    ar[0], ar[12] = 1, -Phi
    z = simulate(ar, [1], 10_000, seed=2)
    c = hannan_rissanen(z - z.mean(), SarimaOrder(0, 0, 0, 1, 0, 0, 12))
    assert abs(c.seasonal_ar[0] - Phi) < 0.05


def test_hannan_rissanen_recovers_multiplicative_ar():
    phi, Phi = 0.5, 0.6
    ar = np.convolve([1, -phi], np.r_[1, np.zeros(11), -Phi])
    z = simulate(ar, [1], 10_000, seed=3)
    c = hannan_rissanen(z - z.mean(), SarimaOrder(1, 0, 0, 1, 0, 0, 12))
    assert abs(c.ar[0] - phi) < 0.05
    assert abs(c.seasonal_ar[0] - Phi) < 0.05


def test_hannan_rissanen_arma():
    z = simulate([1, -0.6], [1, 0.4], 10_000, seed=4)
    c = hannan_rissanen(z - z.mean(), SarimaOrder(1, 0, 1))
    assert abs(c.ar[0] - 0.6) < 0.05
    assert abs(c.ma[0] - 0.4) < 0.05


def test_fit_too_short():
    with pytest.raises(SeriesTooShortError):
        fit(np.ones(20), SarimaOrder(3, 0, 5))


def test_invert_ma_reflects_roots():
    # 1 + 2B has root -0.5; its reflection is 1 + 0.5B
    assert invert_ma((2.0,)) == pytest.approx((0.5,))
    assert invert_ma((0.3,)) == (0.3,)
    out = invert_ma((0.0, 4.0))
    roots = np.roots(np.r_[1.0, out][::-1])
    assert np.all(np.abs(roots) > 1)


def test_non_invertible_fit_warns():
    # an over-differenced white noise has a unit MA root
    z = np.cumsum(np.random.default_rng(5).normal(size=3000))
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        model = fit(np.diff(np.diff(z)), SarimaOrder(0, 0, 1), polish=False)
    assert abs(model.coefficients.ma[0]) <= 1.0


def test_model_json_round_trip(tmp_path):
    y = np.random.default_rng(6).normal(size=600) + 5
    m = fit(y, SarimaOrder(2, 1, 1))
    m.save(tmp_path / "m.json")
    back = SarimaModel.load(tmp_path / "m.json")
    assert back.order == m.order and back.coefficients == m.coefficients
    np.testing.assert_array_equal(back.reduced.ar, m.reduced.ar)
    assert json.loads((tmp_path / "m.json").read_text())["order"]["d"] == 1


def test_stat_bank_shapes():
    seed = np.random.default_rng(7).normal(size=(300, 3))
    bank = StatBank.fit_seed(seed, SarimaOrder(1))
    fc = bank.forecast(30)
    assert fc.shape == (30, 3)
    bank.update(np.zeros((15, 3)))
    assert bank.forecast(30).shape == (30, 3)
    assert bank.memory == 3 * (1 + 1)
    assert not StatPredictor.supports_state
