"""Market primitives: the diffusion model, temporary impact, utilities and the
revenues of a discretized liquidation path.

Conventions
-----------
Inventories and rates carry a trailing axis of length ``d``.  A liquidation
rate ``xi`` reduces inventory, ``dX = -xi dt``, and costs ``f(-xi) dt`` per unit
time.  Utilities are vectorized over their argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp


class DimensionError(ValueError):
    """Array shapes of the model inputs do not agree."""


class NotAUtilityError(ValueError):
    """The supplied function is not increasing, not concave, or has ARA outside (0, inf)."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# -- market ------------------------------------------------------------------


@dataclass(frozen=True)
class MarketModel:
    """Drift ``b`` (d,), volatility ``sigma`` (d, m) and a maximal horizon."""

    sigma: np.ndarray
    b: np.ndarray
    T_max: float = 1.0
    Sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if sigma.ndim != 2 or b.ndim != 1:
            raise DimensionError("sigma must be a (d, m) matrix and b a length-d vector")
        if sigma.shape[0] != b.shape[0]:
            raise DimensionError(
                f"sigma has {sigma.shape[0]} rows but b has length {b.shape[0]}")
        if sigma.shape[1] < 1:
            raise DimensionError("sigma needs at least one noise column")
        object.__setattr__(self, "sigma", _frozen(sigma))
        object.__setattr__(self, "b", _frozen(b))
        object.__setattr__(self, "Sigma", _frozen(sigma @ sigma.T))
        object.__setattr__(self, "T_max", float(self.T_max))

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def m(self) -> int:
        return self.sigma.shape[1]


@dataclass(frozen=True)
class Diagnostic:
    name: str
    passed: bool
    residual: float
    detail: str = ""


@dataclass(frozen=True)
class DiagnosticsReport:
    items: tuple[Diagnostic, ...]

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items)

    def __getitem__(self, name: str) -> Diagnostic:
        for item in self.items:
            if item.name == name:
                return item
        raise KeyError(name)

    def failures(self) -> list[Diagnostic]:
        return [item for item in self.items if not item.passed]


def validate_model(model: MarketModel) -> DiagnosticsReport:
    """Check positivity of the covariance, the no-arbitrage range condition on
    the drift, and the basic dimension/horizon constraints."""
    Sigma, b = model.Sigma, model.b
    scale = max(np.linalg.norm(Sigma), 1e-300)
    eig = np.linalg.eigvalsh(Sigma)
    psd = Diagnostic("covariance_psd", bool(eig.min() >= -1e-12 * scale),
                     float(eig.min()), "smallest eigenvalue of sigma sigma^T")
    symmetric = Diagnostic("covariance_symmetric", bool(np.allclose(Sigma, Sigma.T)),
                           float(np.abs(Sigma - Sigma.T).max()))

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        rel = 0.0
    else:
        w, *_ = np.linalg.lstsq(Sigma, b, rcond=None)
        rel = float(np.linalg.norm(Sigma @ w - b) / bnorm)
    in_range = Diagnostic("drift_in_range", rel <= 1e-10, rel,
                          "relative least-squares residual of Sigma w = b")
    dims = Diagnostic("dimensions", model.d >= 1 and model.m >= 1, 0.0,
                      f"d={model.d}, m={model.m}")
    horizon = Diagnostic("horizon_positive", model.T_max > 0, model.T_max)
    return DiagnosticsReport((psd, symmetric, in_range, dims, horizon))


# -- temporary impact ---------------------------------------------------------


def _norm(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return np.abs(x)
    return np.linalg.norm(x, axis=-1)


@dataclass(frozen=True)
class PowerLaw:
    """Temporary impact ``f(v) = lam * |v|**p`` with ``p > 1``.

    Scalars are read as one-dimensional rates; arrays are reduced with the
    Euclidean norm over their last axis.
    """

    lam: float
    p: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"impact coefficient must be positive, got {self.lam}")
        if not self.p > 1:
            raise ValueError(f"power-law exponent must exceed 1, got {self.p}")

    @property
    def growth_constant(self) -> float:
        # f(v) <= C (1 + |v|^p)
        return self.lam

    def __call__(self, v):
        return self.lam * _norm(v) ** self.p

    def grad(self, v):
        v = np.asarray(v, dtype=float)
        n = _norm(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(n > 0, self.lam * self.p * n ** (self.p - 2), 0.0)
        if v.ndim == 0:
            return coef * v
        return coef[..., None] * v

    def hessian(self, v, floor: float = 1e-12):
        """d x d Hessian for each rate in ``v`` (shape (..., d))."""
        v = np.asarray(v, dtype=float)
        n = np.maximum(_norm(v), floor)
        d = v.shape[-1]
        unit = v / n[..., None]
        outer = unit[..., :, None] * unit[..., None, :]
        coef = self.lam * self.p * n ** (self.p - 2)
        eye = np.eye(d)
        return coef[..., None, None] * (eye + (self.p - 2) * outer)

    def conjugate(self, y):
        """Closed-form convex conjugate ``sup_v (v.y - f(v))``."""
        q = self.p / (self.p - 1)
        return (self.p - 1) * (_norm(y) / self.p) ** q * self.lam ** (-1 / (self.p - 1))

    def conjugate_time_integral(self, b, T: float) -> float:
        """``int_0^T f*(-b t) dt`` for the drift vector ``b``."""
        q = self.p / (self.p - 1)
        return float(self.conjugate(np.atleast_1d(b))) * T ** (q + 1) / (q + 1)

    def superlinear_threshold(self, b_norm: float, T: float) -> float:
        """Smallest ``C`` with ``|v| / f(v) <= 1 / (4 |b| T)`` for all ``|v| > C``."""
        if b_norm <= 0:
            return 0.0
        return (4.0 * b_norm * T / self.lam) ** (1.0 / (self.p - 1))


class Quadratic(PowerLaw):
    """``f(v) = lam |v|^2``; conjugate ``|y|^2 / (4 lam)``."""

    def __init__(self, lam: float):
        super().__init__(lam, 2.0)

    def __repr__(self):
        return f"Quadratic(lam={self.lam})"


ImpactFunction = PowerLaw


def fenchel_conjugate(f: PowerLaw, y):
    return f.conjugate(y)


# -- utilities ----------------------------------------------------------------


class Utility:
    """Increasing concave utility with Arrow-Pratt coefficient in ``[A1, A2]``.

    Subclasses provide ``u``, ``du``, ``d2u`` and a numerically stable
    ``log_gap(x) = log(sup - u(x))`` used by the grid solver, which works with
    the logarithm of the distance to the supremum to stay finite where
    ``u`` is astronomically negative.
    """

    A1: float
    A2: float
    sup: float

    def __call__(self, x):
        return self.u(x)

    def u(self, x):
        raise NotImplementedError

    def du(self, x):
        raise NotImplementedError

    def d2u(self, x):
        raise NotImplementedError

    def log_gap(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.sup - self.u(x))

    def ara(self, x):
        return -self.d2u(x) / self.du(x)

    def value_from_log_gap(self, log_gap):
        with np.errstate(over="ignore"):
            return self.sup - np.exp(log_gap)

    def key(self) -> str:
        return repr(self)


class Cara(Utility):
    """``u(x) = -exp(-A x)``; already satisfies the sandwich with ``A1 = A2 = A``."""

    def __init__(self, A: float):
        if not A > 0:
            raise NotAUtilityError(f"risk aversion must be positive, got {A}")
        self.A = float(A)
        self.A1 = self.A2 = self.A
        self.sup = 0.0

    def __repr__(self):
        return f"Cara(A={self.A!r})"

    def u(self, x):
        with np.errstate(over="ignore"):
            return -np.exp(-self.A * np.asarray(x, dtype=float))

    def du(self, x):
        with np.errstate(over="ignore"):
            return self.A * np.exp(-self.A * np.asarray(x, dtype=float))

    def d2u(self, x):
        with np.errstate(over="ignore"):
            return -self.A ** 2 * np.exp(-self.A * np.asarray(x, dtype=float))

    def log_gap(self, x):
        return -self.A * np.asarray(x, dtype=float)


def _sandwich_window(h_lo, h_hi, xs):
    """Admissible vertical shifts ``c`` with ``h_lo(x) <= c <= h_hi(x)`` on ``xs``."""
    return float(np.max(h_lo(xs))), float(np.min(h_hi(xs)))


class ExpMixture(Utility):
    """Normalized mixture ``u(x) = c - a * sum_i w_i exp(-A_i x)``.

    The ARA of a positive mixture of exponentials lies in
    ``[min A_i, max A_i]`` and tends to the endpoints at ``+-inf``, so those are
    used as the bounds.  The scale ``a = 1 / sum w_i`` and the shift ``c``
    (midpoint of the admissible window) are fixed at construction so that
    ``1/A1 - exp(-A1 x) >= u(x) >= -exp(-A2 x)`` everywhere.
    """

    def __init__(self, weights, rates, shift: float | None = None):
        w = np.asarray(weights, dtype=float)
        A = np.asarray(rates, dtype=float)
        if w.shape != A.shape or w.ndim != 1 or w.size == 0:
            raise NotAUtilityError("weights and rates must be equal-length vectors")
        if np.any(w <= 0) or np.any(A <= 0):
            raise NotAUtilityError("mixture weights and rates must be positive")
        self.weights = _frozen(w)
        self.rates = _frozen(A)
        self.A1 = float(A.min())
        self.A2 = float(A.max())
        self.scale = 1.0 / float(w.sum())
        self._logw = np.log(self.scale * w)

        lo, hi = self.shift_window()
        if lo > hi + 1e-12:
            raise NotAUtilityError(
                f"no vertical shift puts this mixture between the exponential bounds "
                f"(window [{lo:.6g}, {hi:.6g}])")
        self.shift = 0.5 * (lo + hi) if shift is None else float(shift)
        if not lo - 1e-12 <= self.shift <= hi + 1e-12:
            raise NotAUtilityError(f"shift {self.shift} outside admissible [{lo}, {hi}]")
        self.sup = self.shift

    def __repr__(self):
        return (f"ExpMixture(weights={self.weights.tolist()}, rates={self.rates.tolist()}, "
                f"shift={self.shift!r})")

    def _raw(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore"):
            return np.exp(self._logw - self.rates * x[..., None])

    def shift_window(self):
        A1, A2 = self.A1, self.A2
        xs = np.linspace(-60.0, 60.0, 240001)

        def h_lo(x):
            return self._raw(x).sum(-1) - np.exp(-A2 * x)

        def h_hi(x):
            return 1.0 / A1 - np.exp(-A1 * x) + self._raw(x).sum(-1)

        with np.errstate(over="ignore", invalid="ignore"):
            lo, hi = _sandwich_window(h_lo, h_hi, xs)
        return max(lo, 0.0), min(hi, 1.0 / A1)

    def u(self, x):
        return self.shift - self._raw(x).sum(-1)

    def du(self, x):
        return (self.rates * self._raw(x)).sum(-1)

    def d2u(self, x):
        return -(self.rates ** 2 * self._raw(x)).sum(-1)

    def ara(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        e1 = logsumexp(self._logw + np.log(self.rates) - self.rates * x, axis=-1)
        e2 = logsumexp(self._logw + 2 * np.log(self.rates) - self.rates * x, axis=-1)
        return np.exp(e2 - e1)

    def log_gap(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return logsumexp(self._logw - self.rates * x, axis=-1)


class Tabulated(Utility):
    """User-supplied ``u, u', u''`` with ARA bounds measured on ``[lo, hi]``.

    The function is shifted vertically (and, if needed, rescaled by
    ``1/u'(0)``) so the exponential sandwich holds on the sampled range.
    ``sup`` defaults to ``1/A1``, which bounds any normalized utility.
    """

    def __init__(self, u: Callable, du: Callable, d2u: Callable,
                 lo: float = -20.0, hi: float = 20.0, samples: int = 20001,
                 sup: float | None = None):
        self._u, self._du, self._d2u = u, du, d2u
        self.range = (float(lo), float(hi))
        self.A1, self.A2 = ara_bounds(_RawTabulated(u, du, d2u), (lo, hi), samples)
        xs = np.linspace(lo, hi, samples)
        for a in (1.0, 1.0 / float(du(0.0))):
            low, high = _sandwich_window(
                lambda x: -np.exp(-self.A2 * x) - a * u(x),
                lambda x: 1.0 / self.A1 - np.exp(-self.A1 * x) - a * u(x), xs)
            if low <= high:
                break
        else:
            raise NotAUtilityError("could not normalize tabulated utility into the sandwich")
        self.scale, self.shift = a, 0.5 * (low + high)
        self.sup = 1.0 / self.A1 if sup is None else self.scale * float(sup) + self.shift

    def __repr__(self):
        return f"Tabulated(range={self.range}, A1={self.A1!r}, A2={self.A2!r})"

    def u(self, x):
        return self.scale * np.asarray(self._u(np.asarray(x, dtype=float))) + self.shift

    def du(self, x):
        return self.scale * np.asarray(self._du(np.asarray(x, dtype=float)))

    def d2u(self, x):
        return self.scale * np.asarray(self._d2u(np.asarray(x, dtype=float)))


class _RawTabulated(Utility):
    def __init__(self, u, du, d2u):
        self.u, self.du, self.d2u = u, du, d2u


def ara_bounds(u: Utility, range=(-5.0, 5.0), samples: int = 10001,
               floor: float = 1e-6) -> tuple[float, float]:
    """Min and max of ``-u''/u'`` over an evenly sampled interval.

    Exact ``(A, A)`` for CARA.  Raises :class:`NotAUtilityError` when ``u'`` is
    not positive or when the ARA drops to ``floor`` or below (unbounded below
    in the sense of the bounded-ARA class).
    """
    if isinstance(u, Cara):
        return u.A, u.A
    xs = np.linspace(range[0], range[1], samples)
    du = np.asarray(u.du(xs), dtype=float)
    if np.any(~np.isfinite(du)) or np.any(du <= 0):
        raise NotAUtilityError("u' must be positive and finite on the sampled range")
    ara = np.asarray(u.ara(xs), dtype=float)
    lo, hi = float(ara.min()), float(ara.max())
    if not lo > floor:
        raise NotAUtilityError(
            f"absolute risk aversion falls to {lo:.3g}; it must stay bounded away from 0")
    if not np.isfinite(hi):
        raise NotAUtilityError("absolute risk aversion is unbounded above")
    return lo, hi


def sandwich_utilities(A1: float, A2: float):
    """Exponential bounds ``u1(x) = 1/A1 - exp(-A1 x)`` and ``u2(x) = -exp(-A2 x)``."""
    if not 0 < A1 <= A2:
        raise ValueError(f"need 0 < A1 <= A2, got A1={A1}, A2={A2}")

    def u1(x):
        with np.errstate(over="ignore"):
            return 1.0 / A1 - np.exp(-A1 * np.asarray(x, dtype=float))

    def u2(x):
        with np.errstate(over="ignore"):
            return -np.exp(-A2 * np.asarray(x, dtype=float))

    return u1, u2


# -- strategies and revenues ----------------------------------------------------


@dataclass(frozen=True)
class StrategyPath:
    """Piecewise-constant rates on ``t_grid`` that liquidate ``X0`` exactly."""

    t_grid: np.ndarray
    rates: np.ndarray
    X0: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        X0 = np.atleast_1d(np.asarray(self.X0, dtype=float))
        rates = np.asarray(self.rates, dtype=float)
        if rates.ndim == 1:
            rates = rates[:, None] if X0.size == 1 else rates[None, :]
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("t_grid must be strictly increasing and start at 0")
        if rates.shape != (t.size - 1, X0.size):
            raise DimensionError(
                f"rates shape {rates.shape} does not match ({t.size - 1}, {X0.size})")
        if not (np.all(np.isfinite(rates)) and np.all(np.isfinite(X0))):
            raise ValueError("non-finite rates or initial inventory")
        moved = np.abs(rates * np.diff(t)[:, None]).sum(0)
        residual = X0 - (rates * np.diff(t)[:, None]).sum(0)
        tol = 1e-12 * max(np.linalg.norm(X0), np.linalg.norm(moved), 1e-300)
        if np.linalg.norm(residual) > max(tol, 1e-14):
            raise ValueError(f"finite-fuel violated: X(T) = {residual.tolist()}")
        object.__setattr__(self, "t_grid", _frozen(t))
        object.__setattr__(self, "rates", _frozen(rates))
        object.__setattr__(self, "X0", _frozen(X0))

    @property
    def T(self) -> float:
        return float(self.t_grid[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t_grid)

    def inventory(self) -> np.ndarray:
        """Inventory at the grid times, shape (N+1, d), with X(T) set to 0."""
        X = np.empty((self.t_grid.size, self.X0.size))
        X[0] = self.X0
        X[1:] = self.X0 - np.cumsum(self.rates * self.dt[:, None], axis=0)
        X[-1] = 0.0
        return X

    @classmethod
    def linear(cls, X0, T: float, N: int) -> "StrategyPath":
        X0 = np.atleast_1d(np.asarray(X0, dtype=float))
        t = np.linspace(0.0, T, N + 1)
        return cls(t, np.tile(X0 / T, (N, 1)), X0)

    @classmethod
    def from_inventory(cls, t_grid, X) -> "StrategyPath":
        t = np.asarray(t_grid, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X = X.copy()
        X[-1] = 0.0
        return cls(t, -np.diff(X, axis=0) / np.diff(t)[:, None], X[0])


def revenue_step(model: MarketModel, impact: PowerLaw, x_left, rate, dt, dB):
    """Revenue increment of one step with frozen rate.

    The stochastic integral uses the left endpoint of the inventory; the
    drift integral is exact for the linear inventory within the step.
    """
    x_left = np.asarray(x_left, dtype=float)
    x_right = x_left - rate * dt
    noise = np.einsum("...i,ij,...j->...", x_left, model.sigma, dB)
    drift = (0.5 * (x_left + x_right)) @ model.b * dt
    return noise + drift - impact(-rate) * dt


def revenues(model: MarketModel, impact: PowerLaw, strategy: StrategyPath,
             R0: float, noise) -> np.ndarray:
    """Terminal revenue of ``strategy`` for Brownian increments ``noise``.

    ``noise`` has shape (..., N, m); the result has shape (...).
    """
    dB = np.asarray(noise, dtype=float)
    N = strategy.rates.shape[0]
    if dB.ndim == 1 and model.m == 1 and dB.shape[0] == N:
        dB = dB[:, None]
    if dB.shape[-2:] != (N, model.m):
        raise DimensionError(f"noise must end in shape ({N}, {model.m}), got {dB.shape}")
    if not np.all(np.isfinite(dB)) or not np.isfinite(R0):
        raise ValueError("non-finite noise or initial revenue")
    if strategy.X0.size != model.d:
        raise DimensionError("strategy dimension differs from the market model")
    X = strategy.inventory()
    dt = strategy.dt
    stochastic = np.einsum("ni,ij,...nj->...", X[:-1], model.sigma, dB)
    drift = float(((0.5 * (X[:-1] + X[1:])) @ model.b * dt).sum())
    cost = float((impact(-strategy.rates) * dt).sum())
    return R0 + stochastic + drift - cost
