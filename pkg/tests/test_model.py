import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from liquidation.model import (Cara, DimensionError, ExpMixture, MarketModel, NotAUtilityError,
                               PowerLaw, Quadratic, StrategyPath, Tabulated, ara_bounds,
                               fenchel_conjugate, revenue_step, revenues, sandwich_utilities,
                               validate_model)

floats = st.floats(-5.0, 5.0, allow_nan=False)


# -- market model diagnostics ---------------------------------------------------------


def test_validate_full_rank_passes():
    report = validate_model(MarketModel(np.array([[0.3]]), np.array([0.1])))
    assert report.passed
    assert report["covariance_psd"].residual == pytest.approx(0.09)


def test_validate_drift_in_kernel_fails():
    report = validate_model(MarketModel(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([0.0, 1.0])))
    assert not report.passed
    assert [d.name for d in report.failures()] == ["drift_in_range"]


def test_validate_drift_in_range_of_singular_covariance_passes():
    report = validate_model(MarketModel(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([0.5, 0.0])))
    assert report.passed
    assert report["drift_in_range"].residual == pytest.approx(0.0, abs=1e-14)


def test_model_rejects_mismatched_dimensions():
    with pytest.raises(DimensionError):
        MarketModel(np.array([[0.3], [0.2]]), np.array([0.1]))


def test_model_arrays_are_frozen():
    model = MarketModel(np.array([[0.3]]), np.array([0.1]))
    with pytest.raises(ValueError):
        model.b[0] = 1.0


# -- revenues ---------------------------------------------------------------------------


def test_empty_round_trip_returns_initial_revenue():
    model = MarketModel(np.array([[0.3]]), np.array([0.1]))
    s = StrategyPath(np.linspace(0, 1, 5), np.zeros((4, 1)), [0.0])
    noise = np.random.default_rng(0).standard_normal((7, 4, 1))
    np.testing.assert_array_equal(revenues(model, PowerLaw(0.5, 2), s, 3.5, noise), 3.5)


def test_linear_liquidation_revenue_zero_noise():
    # R0 + b X0 T / 2 - lam X0^2 / T
    model = MarketModel(np.array([[0.3]]), np.array([0.2]))
    s = StrategyPath.linear([10.0], 1.0, 16)
    r = revenues(model, PowerLaw(0.5, 2), s, 1.0, np.zeros((16, 1)))
    assert r == pytest.approx(1.0 - 49.0, abs=1e-10)


def test_single_step_stochastic_term():
    model = MarketModel(np.array([[1.0]]), np.array([0.0]))
    s = StrategyPath(np.array([0.0, 2.0]), np.array([[0.5]]), [1.0])
    impact = PowerLaw(0.5, 2)
    base = revenues(model, impact, s, 0.0, np.zeros((1, 1)))
    shocked = revenues(model, impact, s, 0.0, np.array([[0.5]]))
    assert shocked - base == pytest.approx(0.5, abs=1e-14)


def test_revenue_step_sums_to_revenues():
    model = MarketModel(np.array([[0.3, 0.1], [0.0, 0.2]]), np.array([0.05, -0.02]))
    impact = PowerLaw(0.4, 1.5)
    rng = np.random.default_rng(3)
    t = np.linspace(0, 1, 9)
    X = np.vstack([[2.0, -1.0], rng.normal(size=(7, 2)), [0.0, 0.0]])
    s = StrategyPath.from_inventory(t, X)
    dB = rng.normal(size=(8, 2)) * math.sqrt(1 / 8)
    R, x = 0.7, s.X0.copy()
    for i in range(8):
        R += revenue_step(model, impact, x, s.rates[i], s.dt[i], dB[i])
        x = x - s.rates[i] * s.dt[i]
    assert R == pytest.approx(revenues(model, impact, s, 0.7, dB), abs=1e-12)


def test_strategy_must_liquidate():
    with pytest.raises(ValueError, match="finite-fuel"):
        StrategyPath(np.linspace(0, 1, 3), np.array([[1.0], [1.0]]), [3.0])


@given(st.lists(floats, min_size=4, max_size=4), st.lists(floats, min_size=4, max_size=4),
       st.floats(0.0, 1.0))
def test_revenues_concave_in_rates(a, b, lam):
    model = MarketModel(np.array([[0.4]]), np.array([0.3]))
    impact = PowerLaw(0.5, 1.7)
    t = np.linspace(0, 1, 6)
    X1 = np.array([3.0] + a + [0.0])
    X2 = np.array([3.0] + b + [0.0])
    s1, s2 = StrategyPath.from_inventory(t, X1), StrategyPath.from_inventory(t, X2)
    mix = StrategyPath.from_inventory(t, lam * X1 + (1 - lam) * X2)
    noise = np.random.default_rng(1).normal(size=(5, 1)) * 0.3
    lhs = revenues(model, impact, mix, 0.0, noise)
    rhs = lam * revenues(model, impact, s1, 0.0, noise) + (1 - lam) * revenues(
        model, impact, s2, 0.0, noise)
    assert lhs >= rhs - 1e-10 * max(1.0, abs(rhs))


# -- impact and its conjugate -----------------------------------------------------------------


def test_conjugate_at_zero():
    assert PowerLaw(0.7, 1.5).conjugate(np.array([0.0])) == 0.0


def test_half_square_is_self_conjugate():
    f = PowerLaw(0.5, 2.0)
    for y in (-2.0, 0.3, 4.0):
        assert fenchel_conjugate(f, y) == pytest.approx(0.5 * y * y, rel=1e-14)


@given(st.floats(0.1, 3.0), st.floats(1.1, 4.0), st.floats(-5.0, 5.0))
def test_conjugate_matches_numeric_maximization(lam, p, y):
    f = PowerLaw(lam, p)
    span = 2.0 * (abs(y) / (lam * p)) ** (1 / (p - 1)) + 1.0
    res = minimize_scalar(lambda v: -(v * y - lam * abs(v) ** p), bounds=(-span, span),
                          method="bounded", options={"xatol": 1e-12})
    assert f.conjugate(y) == pytest.approx(-res.fun, rel=1e-6, abs=1e-9)


@given(st.floats(0.1, 3.0), st.floats(1.1, 4.0),
       st.lists(floats, min_size=2, max_size=2), st.lists(floats, min_size=2, max_size=2))
def test_fenchel_young_and_convexity(lam, p, x, y):
    f = PowerLaw(lam, p)
    x, y = np.array(x), np.array(y)
    assert x @ y <= f(x) + f.conjugate(y) + 1e-10 * max(1.0, abs(x @ y))
    mid = f.conjugate(0.5 * (x + y))
    assert mid <= 0.5 * (f.conjugate(x) + f.conjugate(y)) + 1e-10 * max(1.0, abs(mid))


def test_conjugate_time_integral_quadratic():
    # f*(y) = y^2 / (4 lam), so the integral is b^2 T^3 / (12 lam)
    f = Quadratic(0.5)
    for T in (1.0, 0.5, 2.0):
        assert f.conjugate_time_integral([0.2], T) == pytest.approx(0.04 * T ** 3 / 6, rel=1e-13)


@given(st.floats(0.2, 2.0), st.floats(1.2, 3.5), st.floats(0.01, 1.0), st.floats(0.1, 3.0))
def test_conjugate_time_integral_matches_quadrature(lam, p, b, T):
    f = PowerLaw(lam, p)
    val, _ = quad(lambda t: float(f.conjugate(np.array([-b * t]))), 0, T, epsabs=1e-13)
    assert f.conjugate_time_integral([b], T) == pytest.approx(val, rel=1e-8, abs=1e-13)


@given(st.floats(0.2, 2.0), st.floats(1.2, 3.5), st.floats(0.01, 1.0), st.floats(0.1, 3.0),
       st.floats(1.0001, 10.0))
def test_superlinear_threshold_is_sharp(lam, p, b, T, factor):
    f = PowerLaw(lam, p)
    C = f.superlinear_threshold(b, T)
    v = C * factor
    assert v / f(v) <= 1.0 / (4 * b * T) * (1 + 1e-12)
    w = C / factor
    assert w / f(w) >= 1.0 / (4 * b * T) * (1 - 1e-12)


def test_impact_rejects_bad_parameters():
    with pytest.raises(ValueError):
        PowerLaw(0.5, 1.0)
    with pytest.raises(ValueError):
        PowerLaw(0.0, 2.0)


# -- utilities ----------------------------------------------------------------------


def test_cara_ara_bounds_are_exact():
    assert ara_bounds(Cara(0.7)) == (0.7, 0.7)


def test_mixture_ara_strictly_inside_endpoints():
    u = ExpMixture([0.5, 0.5], [0.5, 2.0])
    lo, hi = ara_bounds(u, (-5.0, 5.0), 100_000)
    assert 0.5 < lo < hi < 2.0
    far_lo, far_hi = ara_bounds(u, (-40.0, 40.0), 1001)
    assert far_lo == pytest.approx(0.5, abs=1e-6)
    assert far_hi == pytest.approx(2.0, abs=1e-6)


@given(st.lists(st.floats(0.05, 5.0), min_size=2, max_size=4),
       st.lists(st.floats(0.1, 3.0), min_size=2, max_size=4))
def test_mixture_ara_inside_rate_range(w, A):
    n = min(len(w), len(A))
    w, A = w[:n], A[:n]
    try:
        u = ExpMixture(w, A)
    except NotAUtilityError:
        return  # no admissible shift for this mixture
    x = np.linspace(-8, 8, 401)
    ara = u.ara(x)
    assert np.all(ara >= min(A) * (1 - 1e-12)) and np.all(ara <= max(A) * (1 + 1e-12))


def test_ara_unbounded_below_is_rejected():
    with pytest.raises(NotAUtilityError):
        Tabulated(lambda x: x - np.exp(-x), lambda x: 1 + np.exp(-x), lambda x: -np.exp(-x))


def test_sandwich_utilities_at_zero():
    u1, u2 = sandwich_utilities(0.5, 2.0)
    assert u1(0.0) == pytest.approx(1 / 0.5 - 1)
    assert u2(0.0) == -1.0


def test_sandwich_asymptotes():
    u1, u2 = sandwich_utilities(0.8, 0.8)
    assert u1(60.0) == pytest.approx(1 / 0.8, abs=1e-12)
    assert u2(60.0) == pytest.approx(0.0, abs=1e-12)


@given(st.floats(0.5, 2.0))
def test_normalized_cara_lies_between_bounds(A):
    # shift c - exp(-A x) into the window, as the mixture constructor does
    u1, u2 = sandwich_utilities(0.5, 2.0)
    xs = np.linspace(-20, 20, 10_000)
    with np.errstate(over="ignore", invalid="ignore"):
        lo = np.nanmax(np.exp(-A * xs) + u2(xs))
        hi = np.nanmin(u1(xs) + np.exp(-A * xs))
    assert lo <= hi
    c = 0.5 * (lo + hi)
    u = c - np.exp(-A * xs)
    assert np.all(u1(xs) >= u - 1e-8 * np.abs(u)) and np.all(u >= u2(xs) - 1e-8 * np.abs(u))


def test_default_mixture_is_sandwiched():
    u = ExpMixture([0.5, 0.5], [0.5, 2.0])
    u1, u2 = sandwich_utilities(u.A1, u.A2)
    xs = np.linspace(-20, 20, 10_000)
    assert np.all(u1(xs) >= u(xs) - 1e-12) and np.all(u(xs) >= u2(xs) - 1e-12)


@given(st.floats(-30, 30))
def test_log_gap_consistent_with_utility(x):
    for u in (Cara(1.3), ExpMixture([0.5, 0.5], [0.5, 2.0])):
        gap = u.sup - u(x)
        if gap > 1e-8:
            assert u.log_gap(x) == pytest.approx(math.log(gap), rel=1e-9, abs=1e-9)


def test_mixture_rejects_nonpositive_weights():
    with pytest.raises(NotAUtilityError):
        ExpMixture([0.5, -0.5], [0.5, 2.0])
