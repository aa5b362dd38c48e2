"""Path simulation of the controlled inventory/revenue system and the
estimators built on it.

Every Gaussian increment is a pure function of ``(seed, path, step)``: path
``p`` reads its own Philox stream (key = seed, counter word 2 = p) and turns
the raw 64-bit words into normals through the inverse CDF.  Paths are
processed in fixed blocks, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtri

from .dp import FeedbackPolicy
from .model import MarketModel, PowerLaw, StrategyPath, revenue_step

_BLOCK = 2048


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 10_000
    steps: int | None = None
    seed: int = 0
    antithetic: bool = False
    threads: int = 1
    record_paths: bool = False

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("n_paths must be at least 2")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")


def gaussian_block(seed: int, first_path: int, n_paths: int, n_draws: int,
                   antithetic: bool = False) -> np.ndarray:
    """Standard normals of shape (n_paths, n_draws) for paths ``first_path...``."""
    out = np.empty((n_paths, n_draws))
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, 0]
    for i in range(n_paths):
        p = first_path + i
        stream = p // 2 if antithetic else p
        raw = np.random.Philox(key=key, counter=[0, 0, stream, 0]).random_raw(n_draws)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        z = ndtri(u)
        out[i] = -z if (antithetic and p % 2) else z
    return out


@dataclass
class SimResult:
    samples: np.ndarray          # terminal revenue per path
    budget: np.ndarray           # int f(-xi) dt per path
    fuel_residual: np.ndarray    # |X_T| per path
    t_grid: np.ndarray
    X0: np.ndarray
    R0: float
    inventory: np.ndarray | None = None   # (n_paths, steps+1, d)
    rates: np.ndarray | None = None       # (n_paths, steps, d)
    r_clamped: int = 0

    @property
    def n_paths(self) -> int:
        return self.samples.size

    @property
    def budget_mean(self) -> float:
        return float(self.budget.mean())

    @property
    def budget_stderr(self) -> float:
        return float(self.budget.std(ddof=1) / math.sqrt(self.n_paths))

    @property
    def max_fuel_residual(self) -> float:
        return float(self.fuel_residual.max())

    def exp_moment(self, A: float) -> tuple[float, float]:
        """Sample mean and standard error of ``exp(-A R_T)``."""
        with np.errstate(over="ignore"):
            terms = np.exp(-A * self.samples)
        return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(terms.size))

    def log_exp_moment(self, A: float) -> float:
        return float(logsumexp(-A * self.samples) - math.log(self.samples.size))


def _simulate_block(model, impact, policy, X0, R0, t_grid, seed, first, n, antithetic, record):
    steps = t_grid.size - 1
    d, m = model.d, model.m
    dts = np.diff(t_grid)
    T = t_grid[-1]
    z = gaussian_block(seed, first, n, steps * m, antithetic).reshape(n, steps, m)
    X = np.tile(X0, (n, 1))
    R = np.full(n, float(R0))
    budget = np.zeros(n)
    inv = np.empty((n, steps + 1, d)) if record else None
    rts = np.empty((n, steps, d)) if record else None
    if record:
        inv[:, 0] = X
    for i in range(steps):
        dt = dts[i]
        if isinstance(policy, StrategyPath):
            rate = np.broadcast_to(policy.rates[i], X.shape)
        else:
            tau = T - t_grid[i]
            rate = policy.rate(tau, X, R, dt)
        dB = z[:, i, :] * math.sqrt(dt)
        R = R + revenue_step(model, impact, X, rate, dt, dB)
        budget += impact(-rate) * dt
        X = X - rate * dt
        if i == steps - 1 and isinstance(policy, StrategyPath):
            X = np.zeros_like(X) if np.allclose(X, 0.0, atol=1e-9 * max(1.0, np.abs(X0).max())) else X
        if record:
            inv[:, i + 1] = X
            rts[:, i] = rate
    return R, budget, np.linalg.norm(X, axis=1), inv, rts


def simulate(model: MarketModel, impact: PowerLaw, policy, X0, R0: float, config: SimConfig,
             T: float | None = None) -> SimResult:
    """Simulate ``config.n_paths`` paths under a feedback policy or a fixed strategy.

    For a :class:`StrategyPath` the strategy's own time grid is used; for a
    :class:`FeedbackPolicy` the horizon defaults to the surface horizon and is
    split into ``config.steps`` (default: the number of surface layers).
    """
    X0 = np.atleast_1d(np.asarray(X0, dtype=float))
    if isinstance(policy, StrategyPath):
        t_grid = policy.t_grid
        if not np.allclose(policy.X0, X0):
            raise ValueError("strategy was built for a different initial inventory")
    elif isinstance(policy, FeedbackPolicy):
        T = policy.horizon if T is None else T
        steps = config.steps or policy.surface.grid.n_layers
        t_grid = np.linspace(0.0, T, steps + 1)
    else:
        raise TypeError("policy must be a StrategyPath or a FeedbackPolicy")

    starts = list(range(0, config.n_paths, _BLOCK))

    def work(first):
        n = min(_BLOCK, config.n_paths - first)
        local = policy if isinstance(policy, StrategyPath) else FeedbackPolicy(policy.surface)
        out = _simulate_block(model, impact, local, X0, R0, t_grid, config.seed, first, n,
                              config.antithetic, config.record_paths)
        clamped = 0 if isinstance(policy, StrategyPath) else local.r_clamped
        return out + (clamped,)

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    samples = np.concatenate([p[0] for p in parts])
    budget = np.concatenate([p[1] for p in parts])
    fuel = np.concatenate([p[2] for p in parts])
    inv = np.concatenate([p[3] for p in parts]) if config.record_paths else None
    rts = np.concatenate([p[4] for p in parts]) if config.record_paths else None
    return SimResult(samples, budget, fuel, t_grid, X0, float(R0), inv, rts,
                     sum(p[5] for p in parts))


# -- estimators ---------------------------------------------------------------


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    ci99: tuple[float, float]


_Z99 = float(ndtri(0.995))


def jackknife_mean(values) -> Estimate:
    x = np.asarray(values, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    mean = float(x.mean())
    if n == 1:
        return Estimate(mean, 0.0, (mean, mean))
    loo = (x.sum() - x) / (n - 1)
    se = float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return Estimate(mean, se, (mean - _Z99 * se, mean + _Z99 * se))


def estimate_value(result: SimResult, utility) -> Estimate:
    """Sample mean of ``u(R_T)`` with a jackknife standard error and 99% interval."""
    vals = np.asarray(utility(result.samples), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite utility values; revenue beyond the representable range")
    return jackknife_mean(vals)


@dataclass(frozen=True)
class BudgetReport:
    passed: bool
    budget: float
    stderr: float
    bound: float
    margin: float
    threshold: float


def budget_bound(A1: float, V2: float, R0: float, b_norm: float, C: float, T: float) -> float:
    """``(4/3) ((-V2)/A1 + R0 + |b| C T^2)``; the drift term vanishes for ``b = 0``."""
    N_b = b_norm * C * T ** 2 if b_norm > 0 else 0.0
    return 4.0 / 3.0 * (-V2 / A1 + R0 + N_b)


def budget_check(result: SimResult, A1: float, model: MarketModel, impact: PowerLaw,
                 V2: float, T: float, R0: float, C: float | None = None) -> BudgetReport:
    """Compare the simulated impact budget with the bound valid for maximizing sequences."""
    b_norm = float(np.linalg.norm(model.b))
    if C is None:
        C = impact.superlinear_threshold(b_norm, T)
    bound = budget_bound(A1, V2, R0, b_norm, C, T)
    se = result.budget_stderr
    margin = bound + 3 * se - result.budget_mean
    return BudgetReport(bool(margin >= 0), result.budget_mean, se, bound, margin, C)


@dataclass(frozen=True)
class MomentReport:
    value: float
    log_value: float
    top_share: float
    heavy_tail: bool


def moment_check(result: SimResult, A2: float) -> MomentReport:
    """Sample ``E[exp(-2 A2 R_T)]`` and a heavy-tail flag: the largest 0.1% of
    terms carrying more than half of the sum."""
    logs = -2.0 * A2 * result.samples
    total = logsumexp(logs)
    k = max(1, int(math.ceil(1e-3 * logs.size)))
    top = np.sort(logs)[-k:]
    share = float(np.exp(logsumexp(top) - total))
    log_value = float(total - math.log(logs.size))
    with np.errstate(over="ignore"):
        value = float(np.exp(log_value))
    return MomentReport(value, log_value, share, share > 0.5)


@dataclass(frozen=True)
class PathwiseReport:
    violations: int
    worst_margin: float
    pairs: tuple
    threshold: float


def pathwise_bounds(result: SimResult, model: MarketModel, impact: PowerLaw, pairs,
                    C: float | None = None, tol: float = 1e-8) -> PathwiseReport:
    """Two-sided bounds on ``int_{t1}^{t2} (b.X - f(-xi)) dt`` along every path.

    ``pairs`` are grid index pairs ``(i1, i2)``; the integrals are exact for
    the piecewise-linear inventory.
    """
    if result.inventory is None:
        raise ValueError("simulate with record_paths=True to check pathwise bounds")
    b = model.b
    T = float(result.t_grid[-1])
    b_norm = float(np.linalg.norm(b))
    if C is None:
        C = impact.superlinear_threshold(b_norm, T)
    X, xi, t = result.inventory, result.rates, result.t_grid
    dts = np.diff(t)
    drift_steps = (0.5 * (X[:, :-1] + X[:, 1:])) @ b * dts
    cost_steps = impact(-xi) * dts
    slack = b_norm * C * T ** 2 / 2
    worst, bad = math.inf, 0
    for i1, i2 in pairs:
        lo_i, hi_i = min(i1, i2), max(i1, i2)
        middle = (drift_steps[:, lo_i:hi_i] - cost_steps[:, lo_i:hi_i]).sum(1)
        cost = cost_steps[:, lo_i:hi_i].sum(1)
        boundary = X[:, hi_i] @ b * t[hi_i] - X[:, lo_i] @ b * t[lo_i]
        lower = -1.25 * cost - slack + boundary
        upper = -0.75 * cost + slack + boundary
        scale = 1.0 + np.abs(middle)
        margin = np.minimum(middle - lower, upper - middle) / scale
        worst = min(worst, float(margin.min()))
        bad += int((margin < -tol).sum())
    return PathwiseReport(bad, worst, tuple(tuple(p) for p in pairs), C)
