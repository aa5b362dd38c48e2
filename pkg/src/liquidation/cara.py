"""Deterministic benchmark for exponential utility.

For ``u(x) = -exp(-A x)`` the optimal strategy is deterministic and the value
is ``-exp(-A R0 + A * inf int_0^T L(X, xi) dt)`` with the running cost

    L(x, xi) = (A/2) x' Sigma x - b.x + f(-xi).

The infimum is computed by direct transcription: the inventory at the nodes of
a uniform grid is the unknown, rates are piecewise constant, and every term of
the integral is evaluated exactly for the resulting piecewise-linear path.
The objective is strictly convex, so damped Newton on the block-tridiagonal
Hessian converges to the unique minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .model import MarketModel, PowerLaw, StrategyPath, Utility


class CaraConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class CaraLagrangian:
    A: float
    model: MarketModel
    impact: PowerLaw

    def __call__(self, x, xi):
        x = np.asarray(x, dtype=float)
        quad = 0.5 * self.A * np.einsum("...i,ij,...j->...", x, self.model.Sigma, x)
        return quad - x @ self.model.b + self.impact(-np.asarray(xi, dtype=float))


def _neg_exp(log_mag: float) -> float:
    try:
        return -math.exp(log_mag)
    except OverflowError:
        return -math.inf


@dataclass(frozen=True)
class CaraSolution:
    A: float
    R0: float
    strategy: StrategyPath
    cost: float
    iterations: int
    residual: float

    @property
    def log_neg_value(self) -> float:
        """``log(-V)``; finite even when ``V`` itself underflows to ``-inf``."""
        return -self.A * self.R0 + self.A * self.cost

    @property
    def value(self) -> float:
        return _neg_exp(self.log_neg_value)


def _path_terms(X, dt, A, Sigma, b, impact):
    """Exact integrals over each step of a piecewise-linear inventory ``X``."""
    X0, X1 = X[:-1], X[1:]
    dt = np.broadcast_to(np.asarray(dt, dtype=float), X0.shape[:1])
    q00 = np.einsum("ni,ij,nj->n", X0, Sigma, X0)
    q01 = np.einsum("ni,ij,nj->n", X0, Sigma, X1)
    q11 = np.einsum("ni,ij,nj->n", X1, Sigma, X1)
    risk = A * dt * (q00 + q01 + q11) / 6.0
    drift = -dt * ((0.5 * (X0 + X1)) @ b)
    v = (X1 - X0) / dt[:, None]  # = -xi
    return risk, drift, dt * impact(v), v


def cara_cost(A: float, model: MarketModel, impact: PowerLaw,
              strategy: StrategyPath) -> float:
    """``int_0^T L(X_t, xi_t) dt`` for a piecewise-constant strategy.

    The inventory is piecewise linear, so the quadratic and drift terms are
    integrated exactly (Simpson's rule is exact for quadratics).
    """
    if not np.all(np.isfinite(strategy.rates)):
        raise ValueError("non-finite rates")
    risk, drift, imp, _ = _path_terms(strategy.inventory(), strategy.dt, A,
                                      model.Sigma, model.b, impact)
    return float(np.sum(risk + drift + imp))


class _Objective:
    """Cost as a function of the interior inventory nodes on a uniform grid."""

    def __init__(self, A, model, impact, T, X0, N):
        self.A, self.model, self.impact = A, model, impact
        self.N, self.d = N, model.d
        self.dt = T / N
        self.X0 = np.atleast_1d(np.asarray(X0, dtype=float))

    def full(self, Y):
        X = np.empty((self.N + 1, self.d))
        X[0] = self.X0
        X[1:-1] = Y.reshape(self.N - 1, self.d)
        X[-1] = 0.0
        return X

    def value(self, Y):
        risk, drift, imp, _ = _path_terms(self.full(Y), self.dt, self.A,
                                          self.model.Sigma, self.model.b, self.impact)
        return float(np.sum(risk + drift + imp))

    @staticmethod
    def _pattern(n, d):
        """Row/column indices of the diagonal, upper and lower blocks, in that order."""
        ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
        k = np.arange(n)[:, None, None] * d
        u = np.arange(n - 1)[:, None, None] * d
        rows = np.concatenate([(k + ii).ravel(), (u + ii).ravel(), (u + d + ii).ravel()])
        cols = np.concatenate([(k + jj).ravel(), (u + d + jj).ravel(), (u + jj).ravel()])
        return rows, cols

    def gradient_hessian(self, Y):
        A, dt, d, N = self.A, self.dt, self.d, self.N
        Sigma, b = self.model.Sigma, self.model.b
        X = self.full(Y)
        v = (X[1:] - X[:-1]) / dt
        gf = np.atleast_2d(self.impact.grad(v)).reshape(N, d)
        Hf = self.impact.hessian(v)

        g = np.zeros((N + 1, d))
        SX = X @ Sigma
        g[:-1] += A * dt / 6.0 * (2 * SX[:-1] + SX[1:]) - 0.5 * dt * b - gf
        g[1:] += A * dt / 6.0 * (SX[:-1] + 2 * SX[1:]) - 0.5 * dt * b + gf
        grad = g[1:-1].ravel()

        # block tridiagonal over interior nodes 1..N-1
        n = N - 1
        diag = np.empty((n, d, d))
        diag[:] = (2.0 * A * dt / 3.0) * Sigma
        diag += (Hf[:-1] + Hf[1:]) / dt
        off = (A * dt / 6.0) * Sigma - Hf[1:-1] / dt
        rows, cols = self._pattern(n, d)
        blocks = np.concatenate([diag, off, np.transpose(off, (0, 2, 1))])
        H = sp.csc_matrix((blocks.ravel(), (rows, cols)), shape=(n * d, n * d))
        return grad, H


def solve_cara(A: float, model: MarketModel, impact: PowerLaw, T: float, X0, N: int,
               R0: float = 0.0, init=None, tol: float = 1e-9,
               max_iter: int = 200) -> CaraSolution:
    """Minimize the running cost over piecewise-constant rates on ``N`` steps.

    Parameters
    ----------
    init : array, optional
        Starting interior inventory, shape (N-1, d).  Defaults to the
        linear liquidation path.
    tol : float
        Convergence threshold on the sup norm of the gradient of the
        transcribed cost with respect to the node inventories.
    """
    if N < 2:
        raise ValueError(f"need at least 2 steps, got N={N}")
    if not T > 0:
        raise ValueError(f"horizon must be positive, got T={T}")
    obj = _Objective(A, model, impact, T, X0, N)
    t = np.linspace(0.0, T, N + 1)
    if init is None:
        Y = (obj.X0[None, :] * (1.0 - t[1:-1, None] / T)).ravel()
    else:
        Y = np.asarray(init, dtype=float).reshape(-1).copy()
        if Y.size != (N - 1) * obj.d:
            raise ValueError("init must hold the N-1 interior inventory nodes")

    J = obj.value(Y)
    residual = math.inf
    best, stalls = math.inf, 0
    it = 0
    for it in range(1, max_iter + 1):
        grad, H = obj.gradient_hessian(Y)
        residual = float(np.abs(grad).max()) if grad.size else 0.0
        if residual <= tol:
            break
        if residual < 0.5 * best:
            best, stalls = residual, 0
        else:
            stalls += 1
            if stalls >= 4:
                break  # gradient stuck at rounding level
        H = H + 1e-10 * sp.identity(H.shape[0], format="csc")
        step = -spsolve(H, grad)
        slope = float(grad @ step)
        if not slope < 0:
            step, slope = -grad, -float(grad @ grad)
        # accept rounding-level increases so Newton can polish the gradient
        slack = 1e-14 * max(1.0, abs(J))
        alpha = 1.0
        J_trial = obj.value(Y + step)
        while J_trial > J + 1e-4 * alpha * slope + slack and alpha > 1e-12:
            alpha *= 0.5
            J_trial = obj.value(Y + alpha * step)
        if J_trial > J + slack:
            break
        Y, J = Y + alpha * step, J_trial
    grad, _ = obj.gradient_hessian(Y)
    residual = float(np.abs(grad).max()) if grad.size else 0.0

    if residual > max(tol, 1e-7) or not np.isfinite(J):
        raise CaraConvergenceError(
            f"Newton did not converge: gradient residual {residual:.3e} after {it} iterations",
            residual)
    strategy = StrategyPath.from_inventory(t, obj.full(Y))
    return CaraSolution(A=A, R0=float(R0), strategy=strategy, cost=obj.value(Y),
                        iterations=it, residual=residual)


@dataclass(frozen=True)
class CaraPair:
    """Exponential bounds: ``V1 = 1/A1 - exp(...)`` from ``u1``, ``V2`` from ``u2``."""

    A1: float
    A2: float
    R0: float
    cost1: float
    cost2: float

    @property
    def log_neg_V2(self) -> float:
        return -self.A2 * self.R0 + self.A2 * self.cost2

    @property
    def log_gap_V1(self) -> float:
        """``log(1/A1 - V1)``."""
        return -self.A1 * self.R0 + self.A1 * self.cost1

    @property
    def V1(self) -> float:
        return 1.0 / self.A1 + _neg_exp(self.log_gap_V1)

    @property
    def V2(self) -> float:
        return _neg_exp(self.log_neg_V2)


def cara_value_pair(utility: Utility, model: MarketModel, impact: PowerLaw, T: float,
                    X0, R0: float = 0.0, N: int = 200) -> CaraPair:
    X0 = np.atleast_1d(np.asarray(X0, dtype=float))
    c1 = solve_cara(utility.A1, model, impact, T, X0, N).cost
    c2 = c1 if utility.A2 == utility.A1 else solve_cara(utility.A2, model, impact, T, X0, N).cost
    return CaraPair(utility.A1, utility.A2, float(R0), c1, c2)


def quadratic_closed_form(A: float, sigma: float, lam: float, T: float, X0: float):
    """One-dimensional, driftless, ``f = lam v^2``: optimal cost and path.

    Returns ``(cost, X)`` where ``X(t) = X0 sinh(k(T-t)) / sinh(kT)`` and
    ``k = sigma sqrt(A / (2 lam))``.
    """
    k = sigma * math.sqrt(A / (2.0 * lam))
    if k == 0.0:
        return lam * X0 ** 2 / T, lambda t: X0 * (1.0 - np.asarray(t) / T)
    cost = lam * k * X0 ** 2 / math.tanh(k * T)
    return cost, lambda t: X0 * np.sinh(k * (T - np.asarray(t))) / math.sinh(k * T)
