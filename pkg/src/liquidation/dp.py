"""Backward induction for the value function on a (time, inventory, revenue) grid.

Values are stored as ``log_gap = log(sup u - V)``.  For exponential-type
utilities this quantity is affine in the revenue and close to quadratic in the
inventory, so it is what gets interpolated: with four-point stencils in ``r``
and three-point Lagrange stencils in each inventory axis.  Interpolating ``V``
itself would compound a relative bias of order ``(A h_r)^2 / 8`` at every
step; the four-point stencils in ``r`` keep the error small where the local
risk aversion of a non-exponential utility changes.  Stencil rows in ``x`` are
read at revenues shifted by the difference of their linear-liquidation costs,
which keeps the stencil exact for exponential utility under quadratic impact.
Infeasible nodes (positive inventory with no time left) are NaN and are never
mixed into an interpolation with nonzero weight.

Layer ``n`` holds the value with remaining time ``n * dt``; layer 0 is the
terminal condition.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import _kernels
from .model import MarketModel, PowerLaw, Utility

_SNAP = 1e-9


@functools.lru_cache(maxsize=None)
def gauss_hermite(K: int):
    """Nodes and weights for ``E[g(Z)]``, ``Z ~ N(0, 1)``."""
    z, w = hermegauss(K)
    z.setflags(write=False)
    w = w / w.sum()
    w.setflags(write=False)
    return z, w


@dataclass(frozen=True)
class SolverGrid:
    """Uniform grids in time, inventory (per axis) and revenue plus the control set."""

    L: int
    T: float
    x_axes: tuple
    r_grid: np.ndarray
    xi_max: float
    J: int = 12
    K: int = 7
    q: float = 2.0

    @classmethod
    def build(cls, T: float, X0, L: int = 7, x_box=None, N_r: float = 64.0, J: int = 12,
              K: int = 7, xi_max: float | None = None, q: float = 2.0,
              r_center: float = 0.0) -> "SolverGrid":
        """``x_box`` is a list of ``(lo, hi, step)`` per asset; 0 must be a node."""
        X0 = np.atleast_1d(np.asarray(X0, dtype=float))
        if x_box is None:
            x_box = []
            for x0 in X0:
                span = max(abs(x0), 1.0)
                step = span / 40.0
                lo = min(0.0, x0) - 0.2 * span
                hi = max(0.0, x0) + 0.2 * span
                x_box.append((step * np.floor(lo / step), step * np.ceil(hi / step), step))
        if len(x_box) != X0.size:
            raise ValueError(f"x_box has {len(x_box)} axes, inventory has {X0.size}")
        axes = []
        for k, (lo, hi, step) in enumerate(x_box):
            if not (step > 0 and lo <= 0 <= hi):
                raise ValueError(f"x_box[{k}] must satisfy lo <= 0 <= hi and step > 0")
            i_lo = lo / step
            if abs(i_lo - round(i_lo)) > 1e-9:
                raise ValueError(f"x_box[{k}]: 0 must be a grid node (lo/step integer)")
            n = int(round((hi - lo) / step)) + 1
            if n < 3:
                raise ValueError(f"x_box[{k}] needs at least 3 nodes")
            ax = (np.arange(n) + round(i_lo)) * step
            ax.setflags(write=False)
            axes.append(ax)
        if xi_max is None:
            scale = float(np.abs(X0).max()) if np.any(X0) else max(
                float(np.abs(a).max()) for a in axes)
            xi_max = 4.0 * scale / T
        n_r = 2 ** (L + 1) + 1
        r = r_center - N_r + np.arange(n_r) * (N_r / 2 ** L)
        r.setflags(write=False)
        return cls(L=L, T=float(T), x_axes=tuple(axes), r_grid=r, xi_max=float(xi_max),
                   J=J, K=K, q=q)

    @property
    def d(self) -> int:
        return len(self.x_axes)

    @property
    def n_layers(self) -> int:
        return 2 ** self.L

    @property
    def dt(self) -> float:
        return self.T / self.n_layers

    @property
    def taus(self) -> np.ndarray:
        return np.arange(self.n_layers + 1) * self.dt

    @property
    def x_shape(self) -> tuple:
        return tuple(a.size for a in self.x_axes)

    @property
    def x_nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.x_axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def x_steps(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.x_axes])

    @property
    def h_r(self) -> float:
        return float(self.r_grid[1] - self.r_grid[0])

    @property
    def zero_index(self) -> int:
        idx = [int(np.argmin(np.abs(a))) for a in self.x_axes]
        return int(np.ravel_multi_index(idx, self.x_shape))

    def base_controls(self, J: int | None = None) -> np.ndarray:
        """``0`` and ``+-xi_max (j/J)^q e_k``, sorted by norm."""
        J = self.J if J is None else J
        mags = self.xi_max * (np.arange(1, J + 1) / J) ** self.q
        rows = [np.zeros(self.d)]
        for k in range(self.d):
            for m in mags:
                for sgn in (1.0, -1.0):
                    e = np.zeros(self.d)
                    e[k] = sgn * m
                    rows.append(e)
        C = np.array(rows)
        return C[np.argsort(np.linalg.norm(C, axis=1), kind="stable")]

    def describe(self) -> dict:
        return {"L": self.L, "T": self.T, "J": self.J, "K": self.K, "q": self.q,
                "xi_max": self.xi_max,
                "x_box": [[float(a[0]), float(a[-1]), float(a[1] - a[0])] for a in self.x_axes],
                "r_min": float(self.r_grid[0]), "r_max": float(self.r_grid[-1]),
                "n_r": int(self.r_grid.size)}


# -- interpolation ------------------------------------------------------------


def _lagrange3(t):
    return np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)


def x_stencil(grid: SolverGrid, points: np.ndarray):
    """Flat node indices and weights of the tensor 3-point stencil at ``points``.

    Returns ``(idx, w, inside)`` with shapes (n, 3**d), (n, 3**d), (n,).
    Points within ``1e-9`` of a node get exact unit weight on that node.
    """
    points = np.atleast_2d(points)
    n = points.shape[0]
    inside = np.ones(n, dtype=bool)
    per_axis_idx, per_axis_w = [], []
    for k, ax in enumerate(grid.x_axes):
        h = ax[1] - ax[0]
        pos = (points[:, k] - ax[0]) / h
        inside &= (pos >= -_SNAP) & (pos <= ax.size - 1 + _SNAP)
        near = np.rint(pos)
        pos = np.where(np.abs(pos - near) < _SNAP, near, pos)
        centre = np.clip(near, 1, ax.size - 2).astype(np.intp)
        t = pos - centre
        per_axis_idx.append(centre[:, None] + np.array([-1, 0, 1]))
        per_axis_w.append(_lagrange3(t))
    shape = grid.x_shape
    idx_list, w_list = [], []
    for combo in itertools.product(range(3), repeat=grid.d):
        multi = [np.clip(per_axis_idx[k][:, c], 0, shape[k] - 1) for k, c in enumerate(combo)]
        idx_list.append(np.ravel_multi_index(multi, shape))
        w = np.ones(n)
        for k, c in enumerate(combo):
            w = w * per_axis_w[k][:, c]
        w_list.append(w)
    return np.stack(idx_list, axis=1), np.stack(w_list, axis=1), inside


def _combine(values, w):
    # zero weights never touch NaN (infeasible) entries
    return np.where(w != 0.0, w * values, 0.0).sum(axis=1)


def interp_r(rows, shift):
    """Four-point Lagrange interpolation of each row of ``rows`` (M, Nr) at
    ``j + shift[i, k]`` for every revenue index ``j``; returns (M, K, Nr).

    Rows are extended linearly beyond both ends of the grid, so affine rows are
    reproduced exactly everywhere.
    """
    return _kernels.interp_shifted(np.ascontiguousarray(rows, dtype=float),
                                   np.ascontiguousarray(shift, dtype=float))


def interp_r_points(rows, pos):
    """The same rule at one fractional index ``pos[i]`` per row ``rows[i]``."""
    return _kernels.interp_points(np.ascontiguousarray(rows, dtype=float),
                                  np.ascontiguousarray(pos, dtype=float))


def out_of_range(shifts, Nr: int):
    """Per revenue node, how many of the given shifted queries leave the grid.

    ``shifts`` has shape (n, Nr, Q) (NaN entries are ignored); returns
    ``(outside, counted)`` each of shape (n, Nr).
    """
    q = np.arange(Nr)[None, :, None] + shifts
    valid = np.isfinite(q)
    out = valid & ((q < 0) | (q > Nr - 1))
    return out.sum(axis=2), valid.sum(axis=2)


# -- one backward step ----------------------------------------------------------


@dataclass
class StepResult:
    log_gap: np.ndarray
    choice: np.ndarray
    rates: np.ndarray
    clamps: int
    evaluations: int


def liquidation_cost(impact: PowerLaw, x, tau: float):
    """Impact cost ``tau * f(x / tau)`` of liquidating ``x`` at a constant rate."""
    if tau <= 0:
        return np.zeros(np.shape(x)[:-1])
    return impact.lam * np.linalg.norm(x, axis=-1) ** impact.p * tau ** (1.0 - impact.p)


def candidate_log_gap(prev, grid: SolverGrid, model: MarketModel, impact: PowerLaw,
                      rates: np.ndarray, x: np.ndarray, tau_prev: float = 0.0):
    """``log(sup - E[V_prev(next state)])`` for one control per inventory node.

    ``x`` and ``rates`` have shape (n, d).  Returns (n, Nr) values (NaN where
    the control leaves the box or hits an infeasible node) and the revenue
    shifts of all queries, shape (n, Q), NaN for unused stencil rows.

    The inventory stencil is aligned along the revenue axis: each stencil row
    is read at a revenue offset by the difference of the linear-liquidation
    cost over ``tau_prev`` between its node and ``x_next``.  Near the horizon
    the value is roughly a function of ``r - cost(x)``, which this makes smooth
    across the stencil; the offsets are quadratic in ``x`` for quadratic impact,
    so exponential utilities are still interpolated exactly.
    """
    dt = grid.dt
    x_next = x - rates * dt
    idx, w, inside = x_stencil(grid, x_next)
    w = np.where(inside[:, None], w, 0.0)

    Sigma = model.Sigma
    var = dt * (np.einsum("ni,ij,nj->n", x, Sigma, x) + np.einsum("ni,ij,nj->n", x, Sigma, x_next)
                + np.einsum("ni,ij,nj->n", x_next, Sigma, x_next)) / 3.0
    std = np.sqrt(np.maximum(var, 0.0))
    mean = (0.5 * (x + x_next)) @ model.b * dt - impact(-rates) * dt
    z, wq = gauss_hermite(grid.K)
    shift = (mean[:, None] + std[:, None] * z[None, :]) / grid.h_r          # (n, K)

    nodes = grid.x_nodes[idx]                                                 # (n, S, d)
    offset = (liquidation_cost(impact, nodes, tau_prev)
              - liquidation_cost(impact, x_next, tau_prev)[:, None]) / grid.h_r
    active = w != 0.0
    total = shift[:, None, :] + offset[:, :, None]                            # (n, S, K)
    out = np.empty((x.shape[0], prev.shape[1]))
    _kernels.expected_log_gap(prev, idx, w, total, wq, out)
    out[~inside] = np.nan
    queries = np.where(active[:, :, None], total, np.nan).reshape(x.shape[0], -1)
    return out, queries


def backward_step(prev, grid: SolverGrid, model: MarketModel, impact: PowerLaw, tau: float,
                  controls: np.ndarray | None = None, threads: int = 1,
                  rows: np.ndarray | None = None) -> StepResult:
    """Optimize over the control set for the layer with remaining time ``tau``.

    The candidates are the fixed per-axis rates plus the proportional rate
    ``x / tau`` that liquidates linearly over the remaining time.  Ties are
    broken toward the smaller rate.  ``rows`` restricts the computation to a
    subset of flat inventory indices.
    """
    x = grid.x_nodes if rows is None else grid.x_nodes[np.asarray(rows)]
    base = grid.base_controls() if controls is None else controls
    cands = [np.broadcast_to(c, x.shape) for c in base]
    cands.append(x / tau)
    rate_stack = np.stack(cands)  # (C, Nx, d)

    def work(c):
        return candidate_log_gap(prev, grid, model, impact, rate_stack[c], x, tau - grid.dt)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, range(len(cands))))
    else:
        results = [work(c) for c in range(len(cands))]
    phi = np.stack([r[0] for r in results])  # (C, Nx, Nr)
    queries = np.stack([r[1] for r in results])  # (C, Nx, Q)

    norms = np.linalg.norm(rate_stack, axis=2)  # (C, Nx)
    order = np.argsort(norms, axis=0, kind="stable")
    phi_sorted = np.take_along_axis(phi, order[:, :, None], axis=0)
    filled = np.where(np.isnan(phi_sorted), np.inf, phi_sorted)
    best = filled.min(axis=0)
    tie = filled <= best + 1e-12 * np.maximum(1.0, np.abs(best))
    first = np.argmax(tie, axis=0)
    choice = order[first, np.arange(x.shape[0])[:, None]]
    feasible = np.isfinite(best)
    log_gap = np.where(feasible, best, np.nan)
    choice = np.where(feasible, choice, -1)
    picked = rate_stack[np.clip(choice, 0, None), np.arange(x.shape[0])[:, None]]
    picked[~feasible] = np.nan
    # out-of-range revenue reads feeding the stored values
    chosen = queries[np.clip(choice, 0, None), np.arange(x.shape[0])[:, None]]  # (Nx, Nr, Q)
    outside, counted = out_of_range(chosen, grid.r_grid.size)
    clamps = int(outside[feasible].sum())
    evaluations = int(counted[feasible].sum())
    return StepResult(log_gap, choice.astype(np.int32), picked, clamps, evaluations)


def terminal_layer(utility: Utility, grid: SolverGrid) -> np.ndarray:
    """``log(sup - u(r))`` on the zero-inventory row, NaN (infeasible) elsewhere."""
    Nx = int(np.prod(grid.x_shape))
    layer = np.full((Nx, grid.r_grid.size), np.nan)
    layer[grid.zero_index] = utility.log_gap(grid.r_grid)
    return layer


# -- the surface ----------------------------------------------------------------


@dataclass
class ValueSurface:
    grid: SolverGrid
    model: MarketModel
    impact: PowerLaw
    utility: Utility
    log_gap: np.ndarray       # (N+1, Nx, Nr)
    choice: np.ndarray        # (N+1, Nx, Nr), -1 where infeasible or terminal
    rates: np.ndarray         # (N+1, Nx, Nr, d)
    sup: float
    clamps: int = 0
    evaluations: int = 0
    layer_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    layer_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def values(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.sup - np.exp(self.log_gap)

    @property
    def feasible(self) -> np.ndarray:
        return np.isfinite(self.log_gap)

    @property
    def clamp_fraction(self) -> float:
        return self.clamps / max(self.evaluations, 1)

    def layer_of(self, tau: float) -> int:
        n = tau / self.grid.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or not 0 <= round(n) <= self.grid.n_layers:
            raise ValueError(f"remaining time {tau} is not a layer of this surface")
        return int(round(n))

    def x_index(self, x) -> int:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        idx = []
        for k, ax in enumerate(self.grid.x_axes):
            i = int(np.argmin(np.abs(ax - x[k])))
            if abs(ax[i] - x[k]) > 1e-9 * max(1.0, abs(x[k])):
                raise ValueError(f"inventory {x.tolist()} is not a grid node on axis {k}")
            idx.append(i)
        return int(np.ravel_multi_index(idx, self.grid.x_shape))

    def r_index(self, r: float) -> int:
        j = int(np.argmin(np.abs(self.grid.r_grid - r)))
        if abs(self.grid.r_grid[j] - r) > 1e-9 * max(1.0, abs(r)):
            raise ValueError(f"revenue {r} is not a grid node")
        return j

    def log_gap_at(self, tau: float, x, r):
        """Interpolated ``log(sup - V)`` at arbitrary ``(x, r)`` on a layer."""
        n = self.layer_of(tau)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.atleast_1d(np.asarray(r, dtype=float))
        idx, w, inside = x_stencil(self.grid, x)
        rows = _combine(self.log_gap[n][idx], w[:, :, None])
        pos = (r - self.grid.r_grid[0]) / self.grid.h_r
        out = interp_r_points(rows, np.broadcast_to(pos, (rows.shape[0],)))
        out[~inside] = np.nan
        return out

    def value_at(self, tau: float, x, r):
        with np.errstate(over="ignore"):
            return self.sup - np.exp(self.log_gap_at(tau, x, r))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.log_gap, self.choice, self.rates):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def solve_surface(model: MarketModel, impact: PowerLaw, utility: Utility, grid: SolverGrid,
                  threads: int = 1, residual_samples: int = 16,
                  residual_refine: int = 2) -> ValueSurface:
    """Terminal layer followed by ``2**L`` backward steps.

    On ``residual_samples`` inventory rows per layer (evenly spread) the step
    is re-optimized with a ``residual_refine``-times finer control set to
    record the per-layer maximal one-step residual.
    """
    if model.d != grid.d:
        raise ValueError("grid and model dimensions differ")
    N = grid.n_layers
    Nx, Nr = int(np.prod(grid.x_shape)), grid.r_grid.size
    log_gap = np.empty((N + 1, Nx, Nr))
    choice = np.full((N + 1, Nx, Nr), -1, dtype=np.int32)
    rates = np.full((N + 1, Nx, Nr, grid.d), np.nan)
    log_gap[0] = terminal_layer(utility, grid)
    seconds = np.zeros(N + 1)
    residuals = np.zeros(N + 1)
    clamps = evals = 0
    sample_rows = (np.unique(np.linspace(0, Nx - 1, residual_samples).astype(np.intp))
                   if residual_samples else None)
    for n in range(1, N + 1):
        t0 = time.perf_counter()
        step = backward_step(log_gap[n - 1], grid, model, impact, n * grid.dt, threads=threads)
        seconds[n] = time.perf_counter() - t0
        log_gap[n], choice[n], rates[n] = step.log_gap, step.choice, step.rates
        clamps += step.clamps
        evals += step.evaluations
        if sample_rows is not None:
            ref = backward_step(log_gap[n - 1], grid, model, impact, n * grid.dt,
                                controls=grid.base_controls(grid.J * residual_refine),
                                rows=sample_rows)
            a = log_gap[n][sample_rows]
            b = ref.log_gap
            ok = np.isfinite(a) & np.isfinite(b)
            residuals[n] = float(np.abs(np.expm1(b[ok] - a[ok])).max()) if ok.any() else 0.0
    return ValueSurface(grid, model, impact, utility, log_gap, choice, rates, utility.sup,
                        clamps, evals, seconds, residuals)


def bellman_residual(surface: ValueSurface, nodes, refine: int = 4) -> np.ndarray:
    """Relative one-step residuals at ``nodes`` = [(layer, x_index, r_index), ...].

    For each node, ``|V_ref - V| / (sup - V)`` where ``V_ref`` re-optimizes the
    step into the stored previous layer over a ``refine``-times finer control
    set (a superset of the original one).  Infeasible nodes give 0.
    """
    nodes = [tuple(int(v) for v in nd) for nd in nodes]
    out = np.zeros(len(nodes))
    grid = surface.grid
    by_layer: dict[int, list[int]] = {}
    for i, (n, _, _) in enumerate(nodes):
        if n < 1:
            raise ValueError("residuals are undefined on the terminal layer")
        by_layer.setdefault(n, []).append(i)
    for n, members in by_layer.items():
        rows = np.unique([nodes[i][1] for i in members])
        ref = backward_step(surface.log_gap[n - 1], grid, surface.model, surface.impact,
                            n * grid.dt, controls=grid.base_controls(grid.J * refine), rows=rows)
        pos = {int(r): k for k, r in enumerate(rows)}
        for i in members:
            _, ix, jr = nodes[i]
            a, b = surface.log_gap[n, ix, jr], ref.log_gap[pos[ix], jr]
            out[i] = 0.0 if not (np.isfinite(a) and np.isfinite(b)) else abs(np.expm1(b - a))
    return out


# -- feedback policy ---------------------------------------------------------


class PolicyDomainError(ValueError):
    pass


@dataclass
class FeedbackPolicy:
    """Rates from a solved surface: nearest layer, multilinear in ``(x, r)``.

    On the last simulation step, or whenever the looked-up rate would leave the
    inventory box, the proportional rate ``x / tau`` is used so that the
    inventory ends exactly at zero.
    """

    surface: ValueSurface
    r_clamped: int = 0

    @property
    def horizon(self) -> float:
        return self.surface.grid.T

    def rate(self, tau: float, x, r, dt_step: float) -> np.ndarray:
        grid = self.surface.grid
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if tau <= dt_step * (1 + 1e-9):
            return x / tau
        if tau > grid.T * (1 + 1e-9):
            raise PolicyDomainError(f"remaining time {tau} exceeds the surface horizon {grid.T}")
        n = int(np.clip(np.rint(tau / grid.dt), 1, grid.n_layers))
        layer = self.surface.rates[n]  # (Nx, Nr, d)

        corners_idx, corners_w = [np.zeros(x.shape[0], dtype=np.intp)], [np.ones(x.shape[0])]
        shape = grid.x_shape
        for k, ax in enumerate(grid.x_axes):
            h = ax[1] - ax[0]
            pos = (x[:, k] - ax[0]) / h
            bad = (pos < -_SNAP) | (pos > ax.size - 1 + _SNAP)
            if bad.any():
                i = int(np.argmax(bad))
                raise PolicyDomainError(
                    f"inventory {x[i].tolist()} outside the surface box at remaining time {tau:.6g}")
            i0 = np.clip(np.floor(pos), 0, ax.size - 2).astype(np.intp)
            th = np.clip(pos - i0, 0.0, 1.0)
            stride = int(np.prod(shape[k + 1:]))
            new_idx, new_w = [], []
            for ci, cw in zip(corners_idx, corners_w):
                new_idx += [ci + i0 * stride, ci + (i0 + 1) * stride]
                new_w += [cw * (1 - th), cw * th]
            corners_idx, corners_w = new_idx, new_w

        Nr = grid.r_grid.size
        pos = (r - grid.r_grid[0]) / grid.h_r
        outside = (pos < 0) | (pos > Nr - 1)
        self.r_clamped += int(outside.sum())
        pos = np.clip(pos, 0, Nr - 1)
        j0 = np.clip(np.floor(pos), 0, Nr - 2).astype(np.intp)
        tr = pos - j0

        acc = np.zeros_like(x)
        wsum = np.zeros(x.shape[0])
        for ci, cw in zip(corners_idx, corners_w):
            for jj, rw in ((j0, 1 - tr), (j0 + 1, tr)):
                val = layer[ci, jj]
                w = cw * rw
                ok = np.isfinite(val).all(axis=1) & (w > 0)
                acc[ok] += w[ok, None] * val[ok]
                wsum[ok] += w[ok]
        rates = acc / np.where(wsum > 0, wsum, 1.0)[:, None]
        rates[wsum == 0] = (x / tau)[wsum == 0]

        x_next = x - rates * dt_step
        lo = np.array([a[0] for a in grid.x_axes])
        hi = np.array([a[-1] for a in grid.x_axes])
        leave = ((x_next < lo - 1e-12) | (x_next > hi + 1e-12)).any(axis=1)
        rates[leave] = (x / tau)[leave]
        return rates


def extract_policy(surface: ValueSurface) -> FeedbackPolicy:
    return FeedbackPolicy(surface)
