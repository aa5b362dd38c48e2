"""Property checks over solver outputs, each summarized as a :class:`CheckReport`.

Margins are signed and normalized per check (documented on each function);
a check passes when its worst margin is at least ``-(tol_scheme + tol_stat)``.
The scheme tolerance comes from a calibration run that compares the grid
solver with the deterministic exponential benchmark on the same grid.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .cara import CaraConvergenceError, solve_cara
from .config import Scenario
from .dp import SolverGrid, ValueSurface, bellman_residual, extract_policy, solve_surface
from .io import csv_text, jsonable
from .mc import (SimConfig, budget_bound, jackknife_mean, moment_check, pathwise_bounds,
                 simulate)
from .model import Cara

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass
class CheckReport:
    name: str
    anchor: str
    n_points: int
    worst_margin: float
    tol_scheme: float
    tol_stat: float = 0.0
    verdict: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.verdict:
            self.verdict = PASS if self.worst_margin >= -self.tolerance else FAIL

    @property
    def tolerance(self) -> float:
        return self.tol_scheme + self.tol_stat

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def row(self) -> dict:
        return {"check": self.name, "anchor": self.anchor, "n_points": self.n_points,
                "worst_margin": _fmt(self.worst_margin), "tol_scheme": _fmt(self.tol_scheme),
                "tol_stat": _fmt(self.tol_stat), "verdict": self.verdict}


def _fmt(x) -> str:
    return format(float(x), ".10g")


# -- calibration -----------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    tol: float
    gaps: dict
    clamp_fraction: dict


def cara_gap(model, impact, grid: SolverGrid, A: float, X0, R0: float, threads: int = 1,
             N_cara: int = 2000):
    """Relative gap between the grid value and the benchmark, and the clamp fraction."""
    surf = solve_surface(model, impact, Cara(A), grid, threads=threads, residual_samples=0)
    phi = float(surf.log_gap_at(grid.T, np.atleast_2d(X0), [R0])[0])
    ref = solve_cara(A, model, impact, grid.T, X0, N_cara, R0=R0)
    return abs(math.expm1(phi - ref.log_neg_value)), surf.clamp_fraction


def calibrate_scheme_tolerance(scenario: Scenario, rates=None, threads: int = 1,
                               floor: float = 1e-3) -> Calibration:
    """Scheme tolerance = largest relative grid-vs-benchmark gap at the initial
    state over exponential utilities with the given rates (default: the
    utility's ARA bounds), floored at ``floor``."""
    u = scenario.utility
    rates = sorted({u.A1, u.A2}) if rates is None else list(rates)
    gaps, clamps = {}, {}
    for A in rates:
        gaps[A], clamps[A] = cara_gap(scenario.model, scenario.impact, scenario.grid, A,
                                      scenario.X0, scenario.R0, threads)
    return Calibration(max(floor, max(gaps.values())), gaps, clamps)


# -- sandwich ------------------------------------------------------------------


def _cara_costs(surface: ValueSurface, A: float, N: int, threads: int):
    """Benchmark cost for every (layer, inventory node); NaN where the solve fails."""
    grid = surface.grid
    xs = grid.x_nodes
    out = np.full((grid.n_layers + 1, xs.shape[0]), np.nan)
    out[0, grid.zero_index] = 0.0
    tasks = [(n, i) for n in range(1, grid.n_layers + 1) for i in range(xs.shape[0])]

    def work(task):
        n, i = task
        try:
            return solve_cara(A, surface.model, surface.impact, n * grid.dt, xs[i], N).cost
        except CaraConvergenceError:
            return math.nan

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            vals = list(pool.map(work, tasks, chunksize=64))
    else:
        vals = [work(t) for t in tasks]
    for (n, i), v in zip(tasks, vals):
        out[n, i] = v
    return out


def check_sandwich(surface: ValueSurface, tol: float, N_cara: int = 32,
                   threads: int = 1) -> CheckReport:
    """``V2 <= V <= V1`` at every finite node, with both bounds re-solved for the
    node's remaining time and inventory.

    Margins are ``(V - V2) / s`` and ``(V1 - V) / s`` with
    ``s = max(1, sup u - V)``, i.e. relative to the size of the value.
    """
    u = surface.utility
    A1, A2, c = u.A1, u.A2, surface.sup
    cost1 = _cara_costs(surface, A1, N_cara, threads)
    cost2 = cost1 if A2 == A1 else _cara_costs(surface, A2, N_cara, threads)
    r = surface.grid.r_grid[None, None, :]
    phi = surface.log_gap
    psi1 = A1 * (cost1[:, :, None] - r)
    psi2 = A2 * (cost2[:, :, None] - r)
    s = np.maximum(phi, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        lower = c * np.exp(-s) - np.exp(phi - s) + np.exp(psi2 - s)
        upper = (1.0 / A1 - c) * np.exp(-s) - np.exp(psi1 - s) + np.exp(phi - s)
    finite = np.isfinite(phi)
    failed_solves = int(np.isnan(cost1[1:]).sum() + np.isnan(cost2[1:]).sum())
    ok = finite & np.isfinite(psi1) & np.isfinite(psi2)
    lo, hi = lower[ok], upper[ok]
    worst = float(min(lo.min(), hi.min())) if ok.any() else -math.inf
    if failed_solves:
        worst = -math.inf
    nodes = int(finite.sum())
    bad = int(((lo < -tol) | (hi < -tol)).sum())
    return CheckReport(
        "sandwich", "exponential value functions bracket the value function", nodes, worst,
        tol, details={"worst_lower": float(lo.min()), "worst_upper": float(hi.min()),
                      "violations": bad, "failed_benchmark_solves": failed_solves,
                      "fraction_within": 1.0 - bad / max(nodes, 1), "cara_steps": N_cara})


# -- concavity -------------------------------------------------------------------


def _same_parity_pair(rng, size):
    i = int(rng.integers(size))
    j = int(rng.integers(size))
    if (i + j) % 2:
        j = j + 1 if j + 1 < size else j - 1
    return i, j


def check_concavity(surface: ValueSurface, n_segments: int = 1000, seed: int = 0,
                    tol: float = 1e-3) -> CheckReport:
    """Midpoint concavity in (inventory, revenue) on random grid-exact segments.

    Margin: ``(mean(V(z), V(z')) - V(mid))`` negated and divided by the mean
    gap ``sup - V`` at the endpoints, so ``>= 0`` means concave.
    """
    grid = surface.grid
    rng = np.random.default_rng(seed)
    shape, Nr = grid.x_shape, grid.r_grid.size
    margins = []
    attempts = 0
    while len(margins) < n_segments and attempts < 50 * n_segments:
        attempts += 1
        n = int(rng.integers(1, grid.n_layers + 1))
        pairs = [_same_parity_pair(rng, size) for size in shape]
        j1, j2 = _same_parity_pair(rng, Nr)
        a = np.ravel_multi_index([p[0] for p in pairs], shape)
        b = np.ravel_multi_index([p[1] for p in pairs], shape)
        mid = np.ravel_multi_index([(p[0] + p[1]) // 2 for p in pairs], shape)
        phi = surface.log_gap[n]
        p1, p2, pm = phi[a, j1], phi[b, j2], phi[mid, (j1 + j2) // 2]
        if not (np.isfinite(p1) and np.isfinite(p2) and np.isfinite(pm)):
            continue
        mean_gap = logsumexp([p1, p2]) - math.log(2.0)
        margins.append(-math.expm1(pm - mean_gap))
    m = np.array(margins)
    worst = float(m.min()) if m.size else -math.inf
    return CheckReport("concavity", "value function is concave in inventory and revenue",
                       int(m.size), worst, tol,
                       details={"violations": int((m < -tol).sum()), "attempts": attempts,
                                "seed": seed})


# -- initial condition -------------------------------------------------------------


def _log_add_sup(c: float, psi: float) -> float:
    """``log(c + exp(psi))`` for ``c >= 0``."""
    return psi if c <= 0 else float(np.logaddexp(math.log(c), psi))


def check_initial_condition(surface: ValueSurface, X0, R0: float, tol: float,
                            halvings: int = 3, N_cara: int = 200) -> CheckReport:
    """Short-horizon behaviour on the layers ``T, T/2, T/4, ...``.

    At zero inventory the value lies between ``u(R)`` and
    ``u(R + int_0^T f*(-bt) dt)`` and its excess over ``u(R)`` does not grow
    as the horizon shrinks (margins relative to ``max(1, sup u - u(R))``).
    At ``X0 != 0`` the value keeps falling and drops below the lower
    exponential benchmark of the previous, longer horizon (log-ratio margins).
    """
    grid, u = surface.grid, surface.utility
    model, impact = surface.model, surface.impact
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    zero = np.zeros_like(X0)
    c = surface.sup
    uR = float(u(R0))
    scale = max(1.0, float(np.exp(u.log_gap(R0))))
    taus = [grid.T / 2 ** k for k in range(halvings + 1)]
    rows, margins = [], []
    gaps = []
    for k, tau in enumerate(taus):
        surface.layer_of(tau)
        V = float(surface.value_at(tau, zero, [R0])[0])
        F = impact.conjugate_time_integral(model.b, tau)
        upper = float(u(R0 + F))
        gaps.append(V - uR)
        lo_m, hi_m = (V - uR) / scale, (upper - V) / scale
        margins += [lo_m, hi_m]
        rows.append({"tau": tau, "V_zero": V, "u_R": uR, "u_R_plus_bound": upper,
                     "conjugate_integral": F, "lower_margin": lo_m, "upper_margin": hi_m})
    mono = [(gaps[k] - gaps[k + 1]) / scale for k in range(halvings)]
    margins += mono

    blow = []
    phis = [float(surface.log_gap_at(tau, X0, [R0])[0]) for tau in taus]
    for k in range(1, halvings + 1):
        cost2 = solve_cara(u.A2, model, impact, taus[k - 1], X0[0], N_cara).cost
        psi = u.A2 * (cost2 - R0)
        below = phis[k] - _log_add_sup(c, psi)
        falling = phis[k] - phis[k - 1]
        blow.append({"tau": taus[k], "log_gap": phis[k], "log_neg_V2_previous": psi,
                     "below_margin": below, "falling_margin": falling})
        margins += [below, falling]
    strict = all(b["below_margin"] > 0 and b["falling_margin"] > 0 for b in blow)
    worst = float(min(margins))
    report = CheckReport("initial_condition", "short-horizon limit of the value function",
                         len(margins), worst, tol,
                         details={"zero_inventory": rows, "gap_decrease": mono,
                                  "nonzero_inventory": blow})
    if not strict:
        report.verdict = FAIL
    return report


# -- derivative in revenue -----------------------------------------------------------


def _fd_revenue(surface: ValueSurface, X0, R0: float):
    h = surface.grid.h_r
    T = surface.grid.T
    r = R0 + h * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    phi = surface.log_gap_at(T, np.repeat(np.atleast_2d(X0), 5, axis=0), r)
    g = math.exp(phi[2])
    d1 = (phi[3] - phi[1]) / (2 * h)
    d1_wide = (phi[4] - phi[0]) / (4 * h)
    d2 = (phi[3] - 2 * phi[2] + phi[1]) / h ** 2
    d2_wide = (phi[4] - 2 * phi[2] + phi[0]) / (4 * h ** 2)
    V_r = -g * d1
    V_rr = -g * (d1 ** 2 + d2)
    err_r = g * abs(d1 - d1_wide) / 3.0
    err_rr = g * (abs(d1 ** 2 - d1_wide ** 2) + abs(d2 - d2_wide)) / 3.0
    return V_r, V_rr, err_r, err_rr


def _derivative_report(name, anchor, fd, fd_err, est, rel_tol, inconclusive_ratio,
                       extra):
    se = math.sqrt(est.stderr ** 2 + fd_err ** 2)
    denom = abs(est.mean) if est.mean != 0 else 1.0
    rel_diff = abs(fd - est.mean) / denom
    stat = 3.0 * se / denom
    report = CheckReport(name, anchor, 1, -rel_diff, rel_tol, max(0.0, stat - rel_tol),
                         details=dict(extra, finite_difference=fd, fd_error=fd_err,
                                      mc_mean=est.mean, mc_stderr=est.stderr,
                                      combined_stderr=se, relative_difference=rel_diff))
    if stat > inconclusive_ratio:
        report.verdict = INCONCLUSIVE
    return report


def check_partial_derivative_r(surface: ValueSurface, X0, R0: float, sim: SimConfig,
                               rel_tol: float = 0.05, inconclusive_ratio: float = 0.5,
                               samples=None):
    """Finite-difference ``V_r`` (and ``V_rr``) at ``(T, X0, R0)`` against Monte
    Carlo ``E[u'(R_T)]`` (and ``E[u''(R_T)]``) under the extracted policy.

    Agreement is required within ``rel_tol`` relative or three combined standard
    errors, whichever is larger; the verdict is inconclusive when three
    standard errors exceed ``inconclusive_ratio`` of the estimate.
    Returns two reports (first and second derivative).
    """
    u = surface.utility
    if samples is None:
        samples = simulate(surface.model, surface.impact, extract_policy(surface), X0, R0,
                           sim).samples
    V_r, V_rr, e_r, e_rr = _fd_revenue(surface, X0, R0)
    du = np.asarray(u.du(samples), dtype=float)
    d2u = np.asarray(u.d2u(samples), dtype=float)
    extra = {"n_paths": int(samples.size), "seed": sim.seed}
    first = _derivative_report("derivative_r", "revenue derivative equals expected marginal "
                               "utility", V_r, e_r, jackknife_mean(du), rel_tol,
                               inconclusive_ratio, extra)
    second = _derivative_report("second_derivative_r", "second revenue derivative equals "
                                "expected curvature of utility", V_rr, e_rr,
                                jackknife_mean(d2u), rel_tol, inconclusive_ratio, extra)
    return first, second


# -- Bellman residual ------------------------------------------------------------


def sample_nodes(surface: ValueSurface, n_nodes: int, n_layers: int, seed: int):
    """Random finite nodes on ``n_layers`` evenly spread layers."""
    grid = surface.grid
    rng = np.random.default_rng(seed)
    layers = np.unique(np.linspace(1, grid.n_layers, n_layers).round().astype(int))
    per = max(1, n_nodes // layers.size)
    nodes = []
    for n in layers:
        ix, jr = np.nonzero(np.isfinite(surface.log_gap[n]))
        if ix.size == 0:
            continue
        pick = rng.choice(ix.size, size=min(per, ix.size), replace=False)
        pick.sort()
        nodes += [(int(n), int(ix[p]), int(jr[p])) for p in pick]
    return nodes


def _map_nodes(nodes, coarse: SolverGrid, fine: SolverGrid):
    """Same physical (remaining time, inventory, revenue) on a grid with twice the
    time and revenue resolution and identical inventory axes."""
    xs = coarse.x_nodes
    out = []
    for n, ix, jr in nodes:
        tau, r = n * coarse.dt, coarse.r_grid[jr]
        n2 = int(round(tau / fine.dt))
        j2 = int(np.argmin(np.abs(fine.r_grid - r)))
        idx = [int(np.argmin(np.abs(ax - xs[ix][k]))) for k, ax in enumerate(fine.x_axes)]
        out.append((n2, int(np.ravel_multi_index(idx, fine.x_shape)), j2))
    return out


def check_bellman(surface: ValueSurface, tol: float, n_nodes: int = 200, n_layers: int = 8,
                  seed: int = 0, refined: ValueSurface | None = None,
                  refine: int = 4) -> CheckReport:
    """One-step dynamic-programming residuals at sampled nodes.

    The residual is ``|V_ref - V| / (sup - V)`` against a re-optimization over a
    ``refine``-times finer control set.  With ``refined`` (a surface on a grid
    with doubled L, J and K) the same physical nodes are re-tested there and
    the maximum residual must strictly drop.
    """
    nodes = sample_nodes(surface, n_nodes, n_layers, seed)
    res = bellman_residual(surface, nodes, refine=refine)
    worst = float(res.max()) if res.size else 0.0
    details = {"max_residual": worst, "mean_residual": float(res.mean()) if res.size else 0.0,
               "refine": refine, "seed": seed}
    report = CheckReport("bellman", "dynamic programming principle at intermediate times",
                         len(nodes), -worst, tol, details=details)
    if refined is not None:
        fine_nodes = _map_nodes(nodes, surface.grid, refined.grid)
        res_f = bellman_residual(refined, fine_nodes, refine=refine)
        worst_f = float(res_f.max()) if res_f.size else 0.0
        ratio = worst_f / worst if worst > 0 else (0.0 if worst_f == 0 else math.inf)
        details.update(refined_max_residual=worst_f, refinement_ratio=ratio,
                       refined_grid=refined.grid.describe())
        if not (ratio < 1.0 or worst == worst_f == 0.0):
            report.verdict = FAIL
    return report


# -- Monte Carlo diagnostics -------------------------------------------------------


def superlinear_threshold_literal(impact, b_norm: float, T: float) -> float:
    """The alternative threshold ``(4 |b| T lam)^(-1/(p-1))``, reported for comparison."""
    return (4.0 * b_norm * T * impact.lam) ** (-1.0 / (impact.p - 1.0))


def check_budget(result, scenario: Scenario, log_neg_V2: float) -> CheckReport:
    """Simulated impact budget against ``(4/3)((-V2)/A1 + R0 + |b| C T^2)``.

    Margin: ``(bound + 3 se - budget) / max(1, bound)``.
    """
    u, model, impact = scenario.utility, scenario.model, scenario.impact
    T, R0 = scenario.T, scenario.R0
    b_norm = float(np.linalg.norm(model.b))
    with np.errstate(over="ignore"):
        V2 = -math.exp(log_neg_V2) if log_neg_V2 < 709 else -math.inf
    rows = {}
    for label, C in (("threshold", impact.superlinear_threshold(b_norm, T) if b_norm > 0 else 0.0),
                     ("threshold_literal",
                      superlinear_threshold_literal(impact, b_norm, T) if b_norm > 0 else 0.0)):
        bound = budget_bound(u.A1, V2, R0, b_norm, C, T)
        rows[label] = {"C": C, "bound": bound}
    bound = rows["threshold"]["bound"]
    se = result.budget_stderr
    margin = (bound + 3 * se - result.budget_mean) / max(1.0, abs(bound))
    margin_lit = ((rows["threshold_literal"]["bound"] + 3 * se - result.budget_mean)
                  / max(1.0, abs(rows["threshold_literal"]["bound"])))
    return CheckReport("budget", "impact budget bound for maximizing strategies",
                       result.n_paths, min(margin, margin_lit), 0.0,
                       details={"budget_mean": result.budget_mean, "budget_stderr": se,
                                "log_neg_V2": log_neg_V2, **rows})


def check_moment(result, A2: float) -> CheckReport:
    """Sample ``E[exp(-2 A2 R_T)]``; inconclusive when the heavy-tail flag is raised."""
    mom = moment_check(result, A2)
    rep = CheckReport("exp_moment", "finite exponential moment of optimal revenues",
                      result.n_paths, 0.0 if math.isfinite(mom.log_value) else -math.inf, 0.0,
                      details={"log_value": mom.log_value, "top_share": mom.top_share,
                               "heavy_tail": mom.heavy_tail})
    if rep.verdict == PASS and mom.heavy_tail:
        rep.verdict = INCONCLUSIVE
    return rep


def check_pathwise(surface: ValueSurface, scenario: Scenario, n_paths: int, n_pairs: int,
                   seed: int, threads: int = 1, tol: float = 1e-8) -> CheckReport:
    """Two-sided integral bounds along every simulated path for random time pairs.

    Margin: distance to the nearer bound relative to ``1 + |integral|``.
    """
    grid = surface.grid
    cfg = SimConfig(n_paths=n_paths, seed=seed, threads=threads, record_paths=True)
    result = simulate(scenario.model, scenario.impact, extract_policy(surface), scenario.X0,
                      scenario.R0, cfg)
    rng = np.random.default_rng(seed)
    steps = grid.n_layers
    pairs = []
    while len(pairs) < n_pairs:
        i1, i2 = sorted(int(v) for v in rng.integers(0, steps + 1, size=2))
        if i1 < i2:
            pairs.append((i1, i2))
    rep = pathwise_bounds(result, scenario.model, scenario.impact, pairs, tol=tol)
    b_norm = float(np.linalg.norm(scenario.model.b))
    C_lit = superlinear_threshold_literal(scenario.impact, b_norm, scenario.T) if b_norm > 0 else 0.0
    lit = pathwise_bounds(result, scenario.model, scenario.impact, pairs, C=C_lit, tol=tol)
    return CheckReport("pathwise_bounds", "pathwise integral bounds on drift gains and costs",
                       n_paths * n_pairs, rep.worst_margin, tol,
                       details={"violations": rep.violations, "pairs": pairs,
                                "threshold": rep.threshold, "literal_threshold": C_lit,
                                "literal_violations": lit.violations,
                                "literal_worst_margin": lit.worst_margin,
                                "max_fuel_residual": result.max_fuel_residual,
                                "r_lookups_clamped": result.r_clamped})


# -- continuity -------------------------------------------------------------------


def check_continuity(probe, T: float, X0, R0: float, terms: int = 6, tol: float = 1e-3,
                     contraction: float = 0.75) -> CheckReport:
    """Gaps ``|phi_n - phi|`` of the log-gap ``phi = log(sup - V)`` along
    ``T(1 + 2^-n)``, ``T(1 - 2^-n)`` and ``R + 2^-n``.

    Passing needs gaps that do not grow by more than ``tol`` and whose last
    step either contracts by ``contraction`` or is already below ``tol``.
    The worst margin is the smallest decrease ``gap_{n-1} - gap_n``.
    """
    base = probe(T, X0, R0)
    seqs = {
        "T_above": [(T * (1 + 2.0 ** -n), R0) for n in range(1, terms + 1)],
        "T_below": [(T * (1 - 2.0 ** -n), R0) for n in range(1, terms + 1)],
        "R_above": [(T, R0 + 2.0 ** -n) for n in range(1, terms + 1)],
    }
    out, margins, contracts = {}, [], True
    for name, pts in seqs.items():
        gaps = [abs(probe(t, X0, r) - base) for t, r in pts]
        dec = [gaps[k - 1] - gaps[k] for k in range(1, len(gaps))]
        margins += dec
        last_ok = gaps[-1] <= tol or gaps[-1] <= contraction * gaps[-2]
        contracts &= last_ok
        out[name] = {"gaps": gaps, "modulus": max(g * 2.0 ** (k + 1) for k, g in enumerate(gaps)),
                     "last_ratio": gaps[-1] / gaps[-2] if gaps[-2] > 0 else 0.0}
    rep = CheckReport("continuity", "value function is continuous", sum(len(p) for p in
                      seqs.values()), float(min(margins)), tol,
                      details={"base_log_gap": base, **out})
    if not contracts:
        rep.verdict = FAIL
    return rep


class SurfaceProbe:
    """``log(sup - V)`` at arbitrary ``(T, X0, R0)`` by fresh coarse grid solves."""

    def __init__(self, scenario: Scenario, L: int, threads: int = 1):
        self.scenario, self.L, self.threads = scenario, L, threads
        self._cache: dict[float, ValueSurface] = {}

    def __call__(self, T, X0, R0):
        key = float(T)
        if key not in self._cache:
            sc = self.scenario
            args = dict(sc.grid_args, L=self.L)
            grid = SolverGrid.build(T, sc.X0, **args)
            self._cache[key] = solve_surface(sc.model, sc.impact, sc.utility, grid,
                                             threads=self.threads, residual_samples=0)
        return float(self._cache[key].log_gap_at(T, np.atleast_2d(X0), [R0])[0])


# -- full suite ---------------------------------------------------------------------


@dataclass
class Verification:
    reports: list
    calibration: Calibration
    surface: ValueSurface

    @property
    def passed(self) -> bool:
        return all(r.verdict != FAIL for r in self.reports)

    def scoreboard_csv(self) -> str:
        fields = list(CheckReport("", "", 0, 0.0, 0.0).row())
        return csv_text(fields, ([r.row()[k] for k in fields] for r in self.reports))

    def scoreboard_text(self) -> str:
        lines = [f"scheme tolerance {_fmt(self.calibration.tol)} "
                 f"(benchmark gaps {', '.join(f'A={a}: {_fmt(g)}' for a, g in self.calibration.gaps.items())})"]
        width = max(len(r.name) for r in self.reports)
        for r in self.reports:
            lines.append(f"{r.name:<{width}}  {r.verdict.upper():<12}  worst margin "
                         f"{_fmt(r.worst_margin):>14}  tolerance {_fmt(r.tolerance):>10}  "
                         f"points {r.n_points}  [{r.anchor}]")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"

    def details_json(self) -> str:
        payload = {"calibration": {"tol": self.calibration.tol,
                                   "gaps": {str(k): v for k, v in self.calibration.gaps.items()},
                                   "clamp_fraction": {str(k): v for k, v in
                                                      self.calibration.clamp_fraction.items()}},
                   "surface": {"grid": self.surface.grid.describe(),
                               "clamp_fraction": self.surface.clamp_fraction,
                               "max_layer_residual": float(self.surface.layer_residuals.max()),
                               "content_hash": self.surface.content_hash()},
                   "checks": [dict(r.row(), details=r.details) for r in self.reports]}
        return json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"scoreboard.csv": self.scoreboard_csv(), "scoreboard.txt": self.scoreboard_text(),
                 "checks.json": self.details_json()}
        paths = []
        for name, text in files.items():
            p = out / name
            p.write_text(text)
            paths.append(p)
        return paths


def _guard(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # a failing check must not stop the suite
        return CheckReport(name, "check raised an error", 0, -math.inf, 0.0, verdict=FAIL,
                           details={"error": f"{type(exc).__name__}: {exc}"})


def run_verification(scenario: Scenario, threads: int = 1, out_dir=None,
                     refine: bool | None = None, progress=None) -> Verification:
    """Run every check on one scenario; never stops early."""
    say = progress or (lambda msg: None)
    vs = scenario.verify
    refine = vs.refine if refine is None else refine
    seed = scenario.sim.seed
    model, impact, u = scenario.model, scenario.impact, scenario.utility

    say("calibrating scheme tolerance")
    cal = calibrate_scheme_tolerance(scenario, threads=threads)
    tol = cal.tol
    say("solving value surface")
    surface = solve_surface(model, impact, u, scenario.grid, threads=threads)

    reports = []
    say("sandwich")
    reports.append(_guard("sandwich", check_sandwich, surface, tol, vs.cara_steps, threads))
    say("concavity")
    reports.append(_guard("concavity", check_concavity, surface, vs.concavity_segments, seed,
                          tol))
    say("initial condition")
    reports.append(_guard("initial_condition", check_initial_condition, surface, scenario.X0,
                          scenario.R0, tol))

    say("simulating under the extracted policy")
    sim = SimConfig(n_paths=scenario.sim.n_paths, steps=scenario.sim.steps, seed=seed,
                    antithetic=scenario.sim.antithetic, threads=threads)
    try:
        result = simulate(model, impact, extract_policy(surface), scenario.X0, scenario.R0, sim)
    except Exception as exc:
        result = None
        err = f"{type(exc).__name__}: {exc}"
    if result is not None:
        got = _guard("derivative_r", check_partial_derivative_r, surface, scenario.X0,
                     scenario.R0, sim, samples=result.samples)
        reports.extend([got] if isinstance(got, CheckReport) else got)
        log_neg_V2 = u.A2 * (solve_cara(u.A2, model, impact, scenario.T, scenario.X0, 2000).cost
                             - scenario.R0)
        reports.append(_guard("budget", check_budget, result, scenario, log_neg_V2))
        reports.append(_guard("exp_moment", check_moment, result, u.A2))
    else:
        for name in ("derivative_r", "second_derivative_r", "budget", "exp_moment"):
            reports.append(CheckReport(name, "simulation failed", 0, -math.inf, 0.0,
                                       verdict=FAIL, details={"error": err}))
    say("pathwise bounds")
    reports.append(_guard("pathwise_bounds", check_pathwise, surface, scenario,
                          vs.pathwise_paths, vs.pathwise_pairs, seed + 1, threads))

    refined = None
    if refine:
        say("solving refined surface")
        g = scenario.grid
        try:
            fine = scenario.with_grid(L=g.L + 1, J=2 * g.J, K=2 * g.K)
            refined = solve_surface(model, impact, u, fine.grid, threads=threads,
                                    residual_samples=0)
        except Exception:
            refined = None
    say("bellman residuals")
    reports.append(_guard("bellman", check_bellman, surface, tol, vs.bellman_nodes,
                          vs.bellman_layers, seed, refined))

    say("continuity")
    probe = SurfaceProbe(scenario, vs.continuity_L, threads)
    reports.append(_guard("continuity", check_continuity, probe, scenario.T, scenario.X0,
                          scenario.R0, vs.continuity_terms, tol))

    ver = Verification(reports, cal, surface)
    if out_dir is not None:
        ver.write(out_dir)
    return ver
