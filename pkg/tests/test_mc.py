import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from liquidation.cara import cara_cost, quadratic_closed_form, solve_cara
from liquidation.mc import (SimConfig, SimResult, budget_bound, budget_check, estimate_value,
                            gaussian_block, jackknife_mean, moment_check, pathwise_bounds,
                            simulate)
from liquidation.model import (Cara, ExpMixture, MarketModel, PowerLaw, StrategyPath,
                               sandwich_utilities)


def _result(samples):
    samples = np.asarray(samples, dtype=float)
    z = np.zeros_like(samples)
    return SimResult(samples, z, z, np.array([0.0, 1.0]), np.zeros(1), 0.0)


# -- random numbers ----------------------------------------------------------------


def test_gaussians_are_a_function_of_path_and_step():
    full = gaussian_block(11, 0, 10, 6)
    np.testing.assert_array_equal(full[3:7], gaussian_block(11, 3, 4, 6))
    np.testing.assert_array_equal(full[:, :4], gaussian_block(11, 0, 10, 4))
    assert not np.array_equal(full, gaussian_block(12, 0, 10, 6))


def test_gaussian_moments():
    z = gaussian_block(5, 0, 20_000, 5).ravel()
    se = 1 / math.sqrt(z.size)
    assert abs(z.mean()) < 4 * se
    assert abs(z.var() - 1) < 4 * math.sqrt(2) * se
    assert abs((z ** 3).mean()) < 4 * math.sqrt(15) * se


def test_antithetic_pairs_are_negated():
    z = gaussian_block(3, 0, 8, 5, antithetic=True)
    np.testing.assert_array_equal(z[0::2], -z[1::2])


# -- simulation -----------------------------------------------------------------------


def test_idle_empty_portfolio_keeps_initial_revenue():
    model = MarketModel(np.array([[0.3]]), np.array([0.1]))
    s = StrategyPath(np.linspace(0, 1, 9), np.zeros((8, 1)), [0.0])
    res = simulate(model, PowerLaw(0.5, 2), s, [0.0], 2.5, SimConfig(n_paths=100))
    np.testing.assert_array_equal(res.samples, 2.5)
    assert res.samples.var() == 0.0


def test_zero_noise_reproduces_deterministic_cost():
    model = MarketModel(np.array([[0.0]]), np.array([0.15]))
    impact = PowerLaw(0.5, 1.5)
    sol = solve_cara(1.0, model, impact, 1.0, [4.0], 50)
    res = simulate(model, impact, sol.strategy, [4.0], 1.0, SimConfig(n_paths=4))
    expected = 1.0 - cara_cost(1.0, model, impact, sol.strategy)
    np.testing.assert_allclose(res.samples, expected, rtol=0, atol=1e-10)
    assert res.max_fuel_residual == 0.0


def test_cara_strategy_value_matches_benchmark(quad_model):
    model, impact = quad_model
    sol = solve_cara(1.0, model, impact, 1.0, [3.0], 200)
    res = simulate(model, impact, sol.strategy, [3.0], 0.0, SimConfig(n_paths=20_000, seed=4))
    est = estimate_value(res, Cara(1.0))
    assert abs(est.mean - sol.value) <= 3 * est.stderr


def test_bit_identical_across_runs_and_threads(scenario):
    s = StrategyPath.linear(scenario.X0, 1.0, 16)
    a = simulate(scenario.model, scenario.impact, s, scenario.X0, 0.0,
                 SimConfig(n_paths=5000, seed=9, threads=1))
    b = simulate(scenario.model, scenario.impact, s, scenario.X0, 0.0,
                 SimConfig(n_paths=5000, seed=9, threads=3))
    c = simulate(scenario.model, scenario.impact, s, scenario.X0, 0.0,
                 SimConfig(n_paths=5000, seed=9, threads=1))
    assert a.samples.tobytes() == b.samples.tobytes() == c.samples.tobytes()
    assert a.budget.tobytes() == b.budget.tobytes()


def test_policy_simulation_is_thread_invariant(small_surface, scenario):
    from liquidation.dp import extract_policy
    cfg = dict(n_paths=3000, seed=2)
    a = simulate(scenario.model, scenario.impact, extract_policy(small_surface), scenario.X0,
                 0.0, SimConfig(threads=1, **cfg))
    b = simulate(scenario.model, scenario.impact, extract_policy(small_surface), scenario.X0,
                 0.0, SimConfig(threads=2, **cfg))
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.max_fuel_residual <= 1e-9


def test_antithetic_does_not_increase_error_for_linear_payoff(scenario):
    s = StrategyPath.linear(scenario.X0, 1.0, 16)
    plain = simulate(scenario.model, scenario.impact, s, scenario.X0, 0.0,
                     SimConfig(n_paths=2000, seed=1))
    anti = simulate(scenario.model, scenario.impact, s, scenario.X0, 0.0,
                    SimConfig(n_paths=2000, seed=1, antithetic=True))
    pairs = 0.5 * (anti.samples[0::2] + anti.samples[1::2])
    se_anti = pairs.std(ddof=1) / math.sqrt(pairs.size)
    se_plain = plain.samples.std(ddof=1) / math.sqrt(plain.n_paths)
    assert se_anti <= se_plain


@given(st.integers(0, 2 ** 32))
def test_sample_level_sandwich(seed):
    model = MarketModel(np.array([[0.3]]), np.array([0.1]))
    u = ExpMixture([0.5, 0.5], [0.5, 2.0])
    u1, u2 = sandwich_utilities(u.A1, u.A2)
    s = StrategyPath.linear([2.0], 1.0, 8)
    res = simulate(model, PowerLaw(0.5, 2), s, [2.0], 0.0, SimConfig(n_paths=64, seed=seed))
    assert u1(res.samples).mean() >= u(res.samples).mean() >= u2(res.samples).mean()


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_paths=1)
    with pytest.raises(ValueError):
        SimConfig(n_paths=11, antithetic=True)


# -- estimators ----------------------------------------------------------------------


def test_constant_samples():
    est = estimate_value(_result([1.5] * 10), Cara(1.0))
    assert est.mean == pytest.approx(-math.exp(-1.5))
    assert est.stderr == pytest.approx(0.0, abs=1e-15)


def test_two_samples_mean():
    est = estimate_value(_result([0.0, 1.0]), Cara(2.0))
    assert est.mean == pytest.approx(0.5 * (-1.0 - math.exp(-2.0)))


def test_standard_normal_lognormal_moment():
    z = gaussian_block(0, 0, 100_000, 1)[:, 0]
    est = estimate_value(_result(z), Cara(1.0))
    assert abs(est.mean + math.exp(0.5)) <= 3 * est.stderr
    assert est.ci99[0] < est.mean < est.ci99[1]


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50))
def test_jackknife_of_mean_is_classical_stderr(xs):
    x = np.array(xs)
    est = jackknife_mean(x)
    assert est.stderr == pytest.approx(x.std(ddof=1) / math.sqrt(x.size), rel=1e-9, abs=1e-12)


def test_non_finite_utility_is_reported():
    with pytest.raises(FloatingPointError):
        estimate_value(_result([-1e6, 0.0]), Cara(1.0))


# -- budget and moments -----------------------------------------------------------------


def test_budget_zero_for_empty_portfolio():
    model = MarketModel(np.array([[0.3]]), np.array([0.0]))
    s = StrategyPath(np.linspace(0, 1, 5), np.zeros((4, 1)), [0.0])
    res = simulate(model, PowerLaw(0.5, 2), s, [0.0], 0.0, SimConfig(n_paths=10))
    rep = budget_check(res, 0.5, model, PowerLaw(0.5, 2), -1.0, 1.0, 0.0)
    assert rep.budget == 0.0 and rep.passed


def test_budget_of_closed_form_strategy(quad_model):
    model, impact = quad_model
    A, X0, T = 1.0, 10.0, 1.0
    k = 0.3 * math.sqrt(A / (2 * 0.5))
    exact = 0.5 * X0 ** 2 * k ** 2 / math.sinh(k * T) ** 2 * (T / 2 + math.sinh(2 * k * T) / (4 * k))
    sol = solve_cara(A, model, impact, T, [X0], 2000)
    res = simulate(model, impact, sol.strategy, [X0], 0.0, SimConfig(n_paths=4))
    assert res.budget_mean == pytest.approx(exact, rel=1e-5)
    rep = budget_check(res, A, model, impact, sol.value, T, 0.0)
    assert rep.passed and rep.bound == pytest.approx(4 / 3 * (-sol.value / A))


def test_budget_bound_drift_term():
    assert budget_bound(0.5, -1.0, 0.2, 0.1, 3.0, 2.0) == pytest.approx(4 / 3 * (2.0 + 0.2 + 1.2))
    assert budget_bound(0.5, -1.0, 0.2, 0.0, 3.0, 2.0) == pytest.approx(4 / 3 * 2.2)


def test_fast_liquidation_budget_is_reported_not_asserted(quad_model):
    model, impact = quad_model
    s = StrategyPath(np.array([0.0, 0.01, 1.0]), np.array([[1000.0], [0.0]]), [10.0])
    res = simulate(model, impact, s, [10.0], 0.0, SimConfig(n_paths=4))
    rep = budget_check(res, 1.0, model, impact, -1.0, 1.0, 0.0)
    assert rep.budget > rep.bound and not rep.passed


def test_moment_of_constant_revenue():
    rep = moment_check(_result([0.3] * 5), 2.0)
    assert rep.value == pytest.approx(math.exp(-4.0 * 0.3))
    assert not rep.heavy_tail


def test_moment_of_deterministic_strategy_is_lognormal():
    model = MarketModel(np.array([[0.3]]), np.array([0.1]))
    impact = PowerLaw(0.5, 2)
    A2 = 2.0
    sol = solve_cara(A2, model, impact, 1.0, [1.0], 32)
    res = simulate(model, impact, sol.strategy, [1.0], 0.0, SimConfig(n_paths=100_000, seed=3))
    X = sol.strategy.inventory()
    dt = sol.strategy.dt
    mu = float(((0.5 * (X[:-1] + X[1:])) @ model.b * dt).sum()
               - (impact(-sol.strategy.rates) * dt).sum())
    var = float((0.09 * X[:-1, 0] ** 2 * dt).sum())
    exact = math.exp(-2 * A2 * mu + 2 * A2 ** 2 * var)
    terms = np.exp(-2 * A2 * res.samples)
    se = terms.std(ddof=1) / math.sqrt(terms.size)
    rep = moment_check(res, A2)
    assert abs(rep.value - exact) <= 4 * se
    assert not rep.heavy_tail


def test_heavy_tail_flag_for_large_exposure():
    model = MarketModel(np.array([[3.0]]), np.array([0.0]))
    s = StrategyPath.linear([10.0], 1.0, 8)
    res = simulate(model, PowerLaw(0.5, 2), s, [10.0], 0.0, SimConfig(n_paths=10_000))
    assert moment_check(res, 2.0).heavy_tail


# -- pathwise bounds ---------------------------------------------------------------------


def test_pathwise_bounds_hold_for_benchmark_strategy(scenario):
    sol = solve_cara(1.0, scenario.model, scenario.impact, 1.0, scenario.X0, 64)
    res = simulate(scenario.model, scenario.impact, sol.strategy, scenario.X0, 0.0,
                   SimConfig(n_paths=500, record_paths=True))
    pairs = [(0, 64), (5, 40), (10, 11), (63, 64)]
    rep = pathwise_bounds(res, scenario.model, scenario.impact, pairs)
    assert rep.violations == 0 and rep.worst_margin > -1e-8
    assert rep.threshold == pytest.approx(scenario.impact.superlinear_threshold(0.1, 1.0))


def test_pathwise_needs_recorded_paths(scenario):
    s = StrategyPath.linear(scenario.X0, 1.0, 4)
    res = simulate(scenario.model, scenario.impact, s, scenario.X0, 0.0, SimConfig(n_paths=4))
    with pytest.raises(ValueError, match="record_paths"):
        pathwise_bounds(res, scenario.model, scenario.impact, [(0, 2)])


def test_closed_form_helper_consistent(quad_model):
    cost, path = quadratic_closed_form(1.0, 0.3, 0.5, 1.0, 10.0)
    assert path(0.0) == pytest.approx(10.0) and path(1.0) == pytest.approx(0.0, abs=1e-12)
