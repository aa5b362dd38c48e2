"""Command-line front end.

Every subcommand takes an optional scenario document (JSON; the shipped
default when omitted) and the common flags ``--seed``, ``--threads``,
``--out`` and ``--format``.  ``LIQUIDATION_THREADS`` sets the thread count
when ``--threads`` is absent.

Exit codes: 0 success, 1 usage or configuration error, 2 a check failed,
3 a numerical method did not converge.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as lio
from . import plotting
from .cara import CaraConvergenceError, cara_value_pair, quadratic_closed_form, solve_cara
from .config import ConfigError, build_scenario, default_document, load_scenario
from .dp import PolicyDomainError, extract_policy, solve_surface
from .mc import SimConfig, estimate_value, simulate
from .model import Cara, validate_model
from .verify import cara_gap, run_verification

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "LIQUIDATION_THREADS"


class UsageError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------------


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("--threads: must be at least 1")
    return n


def _read_doc(path) -> dict:
    if path is None:
        return default_document()
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError("<root>", f"cannot read {path}: {exc}") from None


def _scenario(args):
    return load_scenario(args.config, seed=args.seed, threads=_threads(args))


def _out_dir(args, scenario) -> Path:
    return Path(args.out if args.out is not None else scenario.out_dir)


def _emit(args, out: Path, stem: str, rows: list[dict]) -> Path:
    """Write a summary table as ``stem.csv`` or ``stem.json``."""
    if args.format == "json":
        path = out / f"{stem}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(lio.jsonable(rows), indent=2, sort_keys=True) + "\n")
        return path
    header = list(rows[0]) if rows else []
    return lio.write_csv(out / f"{stem}.csv", header, ([r[k] for k in header] for r in rows))


def _print_rows(rows: list[dict]) -> None:
    for r in rows:
        print("  ".join(f"{k}={_short(v)}" for k, v in r.items()))


def _short(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return v


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
        else:
            node = node.setdefault(k, {})
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError("--values: no values given")
    return vals


# -- subcommands ----------------------------------------------------------------


def cmd_validate(args) -> int:
    sc = _scenario(args)
    report = validate_model(sc.model)
    rows = [{"diagnostic": d.name, "passed": d.passed, "residual": d.residual, "detail": d.detail}
            for d in report.items]
    _print_rows(rows)
    g = sc.grid
    print(f"grid: L={g.L} layers={g.n_layers} x_nodes={int(np.prod(g.x_shape))} "
          f"r_nodes={g.r_grid.size} controls={len(g.base_controls()) + 1} K={g.K}")
    print(f"utility: {sc.utility!r}  ARA bounds [{sc.utility.A1:g}, {sc.utility.A2:g}]")
    return EXIT_OK if report.passed else EXIT_CONFIG


def cmd_solve_cara(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args, sc)
    rates = [args.A] if args.A is not None else sorted({sc.utility.A1, sc.utility.A2})
    rows = []
    for A in rates:
        t0 = time.perf_counter()
        sol = solve_cara(A, sc.model, sc.impact, sc.T, sc.X0, args.steps, R0=sc.R0)
        row = {"A": A, "steps": args.steps, "cost": sol.cost, "log_neg_value": sol.log_neg_value,
               "value": sol.value, "iterations": sol.iterations, "residual": sol.residual}
        if (sc.model.d == 1 and sc.impact.p == 2.0 and not np.any(sc.model.b)):
            exact, _ = quadratic_closed_form(A, float(np.sqrt(sc.model.Sigma[0, 0])),
                                             sc.impact.lam, sc.T, float(sc.X0[0]))
            row["closed_form_cost"] = exact
            row["relative_error"] = abs(sol.cost - exact) / abs(exact)
        row["seconds"] = time.perf_counter() - t0
        rows.append(row)
        X = sol.strategy.inventory()
        t = sol.strategy.t_grid
        d = X.shape[1]
        lio.write_csv(out / f"cara_strategy_A{A:g}.csv",
                      ["t"] + [f"x{k + 1}" for k in range(d)] + [f"rate{k + 1}" for k in range(d)],
                      ([t[i]] + list(X[i]) + (list(sol.strategy.rates[i]) if i < t.size - 1
                                              else [math.nan] * d) for i in range(t.size)))
    _print_rows(rows)
    _emit(args, out, "cara", [{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    return EXIT_OK


def _solve(sc, threads):
    t0 = time.perf_counter()
    surface = solve_surface(sc.model, sc.impact, sc.utility, sc.grid, threads=threads)
    return surface, time.perf_counter() - t0


def cmd_solve_dp(args) -> int:
    threads = _threads(args)
    sc = _scenario(args)
    if args.L is not None:
        sc = sc.with_grid(L=args.L)
    out = _out_dir(args, sc)
    surface, secs = _solve(sc, threads)
    phi = float(surface.log_gap_at(sc.T, np.atleast_2d(sc.X0), [sc.R0])[0])
    row = {"L": sc.grid.L, "T": sc.T, "value": float(surface.utility.value_from_log_gap(phi)),
           "log_gap": phi, "clamp_fraction": surface.clamp_fraction,
           "max_layer_residual": float(surface.layer_residuals.max()),
           "content_hash": surface.content_hash()}
    if isinstance(sc.utility, Cara):
        ref = solve_cara(sc.utility.A, sc.model, sc.impact, sc.T, sc.X0, 2000, R0=sc.R0)
        row["cara_value"] = ref.value
        row["relative_gap"] = abs(math.expm1(phi - ref.log_neg_value))
    lio.write_surface(surface, out / "surface.bin")
    if args.dump_csv:
        header, rows = lio.surface_rows(surface)
        lio.write_csv(out / "surface.csv", header, rows)
    _emit(args, out, "dp", [row])
    _print_rows([dict(row, seconds=secs)])
    return EXIT_OK


def cmd_simulate(args) -> int:
    threads = _threads(args)
    sc = _scenario(args)
    out = _out_dir(args, sc)
    n_paths = args.paths if args.paths is not None else sc.sim.n_paths
    cfg = SimConfig(n_paths=n_paths, steps=args.steps or sc.sim.steps, seed=sc.sim.seed,
                    antithetic=sc.sim.antithetic, threads=threads)
    if args.cara is not None:
        steps = args.steps or sc.sim.steps or 200
        policy = solve_cara(args.cara, sc.model, sc.impact, sc.T, sc.X0, steps).strategy
        source = f"cara A={args.cara:g}"
    else:
        surface = lio.read_surface(args.surface) if args.surface else _solve(sc, threads)[0]
        policy = extract_policy(surface)
        source = f"surface {args.surface}" if args.surface else "surface (solved)"
    result = simulate(sc.model, sc.impact, policy, sc.X0, sc.R0, cfg)
    header, rows = lio.sim_rows(result)
    lio.write_csv(out / "sim.csv", header, rows)
    est = estimate_value(result, sc.utility)
    row = {"source": source, "paths": result.n_paths, "steps": result.t_grid.size - 1,
           "seed": cfg.seed, "mean_utility": est.mean, "stderr": est.stderr,
           "ci99_low": est.ci99[0], "ci99_high": est.ci99[1], "mean_revenue":
           float(result.samples.mean()), "impact_budget": result.budget_mean,
           "max_fuel_residual": result.max_fuel_residual, "revenue_clamped": result.r_clamped}
    _emit(args, out, "sim_summary", [row])
    _print_rows([row])
    return EXIT_OK


def cmd_verify(args) -> int:
    threads = _threads(args)
    sc = _scenario(args)
    out = _out_dir(args, sc)
    say = (lambda msg: print(f"[verify] {msg}", file=sys.stderr)) if not args.quiet else None
    ver = run_verification(sc, threads=threads, out_dir=out,
                           refine=False if args.no_refine else None, progress=say)
    print(ver.scoreboard_text(), end="")
    if args.format == "json":
        (out / "scoreboard.json").write_text(
            json.dumps([r.row() for r in ver.reports], indent=2, sort_keys=True) + "\n")
    return EXIT_OK if ver.passed else EXIT_CHECK


def cmd_sweep(args) -> int:
    threads = _threads(args)
    base = _read_doc(args.config)
    values = _parse_values(args.values)
    rows = []
    out = None
    for v in values:
        doc = copy.deepcopy(base)
        try:
            _set_path(doc, args.param, v)
        except (IndexError, ValueError, TypeError):
            raise ConfigError(args.param, "cannot be set by the sweep") from None
        sc = build_scenario(doc, seed=args.seed, threads=threads)
        if args.L is not None:
            sc = sc.with_grid(L=args.L)
        out = out or _out_dir(args, sc)
        pair = cara_value_pair(sc.utility, sc.model, sc.impact, sc.T, sc.X0, sc.R0,
                               N=args.steps)
        row = {"param": args.param, "value": v, "V_lower": pair.V2, "V_upper": pair.V1}
        if args.method == "dp":
            surface, _ = _solve(sc, threads)
            phi = float(surface.log_gap_at(sc.T, np.atleast_2d(sc.X0), [sc.R0])[0])
            row["V_dp"] = float(surface.utility.value_from_log_gap(phi))
        rows.append(row)
    _emit(args, out, "sweep", rows)
    _print_rows(rows)
    return EXIT_OK


def cmd_plot(args) -> int:
    threads = _threads(args)
    sc = _scenario(args)
    if args.L is not None:
        sc = sc.with_grid(L=args.L)
    out = _out_dir(args, sc)
    kinds = ["value-vs-T", "heatmap", "convergence"] if args.kind == "all" else [args.kind]
    written = []
    if "value-vs-T" in kinds:
        Ts = [sc.T * f for f in (0.125, 0.25, 0.5, 1.0)]
        curves = {"grid solver": [], "exponential bound A1": [], "exponential bound A2": []}
        sup = sc.utility.sup
        for T in Ts:
            sub = sc.with_grid(T=T)
            surface, _ = _solve(sub, threads)
            curves["grid solver"].append(float(surface.log_gap_at(T, np.atleast_2d(sc.X0),
                                                                  [sc.R0])[0]))
            pair = cara_value_pair(sc.utility, sc.model, sc.impact, T, sc.X0, sc.R0)
            with np.errstate(divide="ignore"):
                curves["exponential bound A1"].append(float(np.log(sup - pair.V1)))
                curves["exponential bound A2"].append(float(np.log(sup - pair.V2)))
        svg = plotting.value_vs_horizon(Ts, curves, ylabel="log(sup u - V)")
        written.append(plotting.write_svg(svg, out / "value_vs_T.svg"))
    if "heatmap" in kinds:
        surface = lio.read_surface(args.surface) if args.surface else _solve(sc, threads)[0]
        N = surface.grid.n_layers
        layers = ([int(v) for v in args.layers.split(",")] if args.layers
                  else sorted({0, N // 4, N // 2, N}))
        for n in layers:
            if not 0 <= n <= N:
                raise UsageError(f"--layers: layer {n} outside 0..{N}")
            written.append(plotting.write_svg(plotting.layer_heatmap(surface, n),
                                              out / f"heatmap_layer{n:03d}.svg"))
    if "convergence" in kinds:
        levels = list(range(max(3, sc.grid.L - 3), sc.grid.L + 1))
        errors = {}
        for A in sorted({sc.utility.A1, sc.utility.A2}):
            errors[f"A={A:g}"] = [cara_gap(sc.model, sc.impact, sc.with_grid(L=L).grid, A,
                                           sc.X0, sc.R0, threads)[0] for L in levels]
        written.append(plotting.write_svg(plotting.convergence(levels, errors),
                                          out / "convergence.svg"))
    for p in written:
        print(p)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", nargs="?", help="scenario JSON (default: shipped scenario)")
    common.add_argument("--seed", type=int, help="override sim.seed")
    common.add_argument("--threads", type=int,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("--out", help="output directory (default: output.dir)")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="summary table format")

    parser = argparse.ArgumentParser(prog="liquidation", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="model and grid diagnostics")

    p = sub.add_parser("solve-cara", parents=[common], help="deterministic exponential benchmark")
    p.add_argument("--A", type=float, help="risk aversion (default: the utility's ARA bounds)")
    p.add_argument("--steps", type=int, default=2000)

    p = sub.add_parser("solve-dp", parents=[common], help="grid solver; writes surface.bin")
    p.add_argument("--L", type=int, help="override grid.L")
    p.add_argument("--dump-csv", action="store_true", help="also write the node table")

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo under a policy")
    p.add_argument("--surface", help="surface file from solve-dp (default: solve now)")
    p.add_argument("--cara", type=float, metavar="A", help="use the exponential benchmark strategy")
    p.add_argument("--paths", type=int, help="override sim.n_paths")
    p.add_argument("--steps", type=int, help="override sim.steps")

    p = sub.add_parser("verify", parents=[common], help="run every check; exit 2 on failure")
    p.add_argument("--no-refine", action="store_true", help="skip the refined Bellman surface")
    p.add_argument("--quiet", action="store_true", help="no progress on stderr")

    p = sub.add_parser("sweep", parents=[common], help="value against one parameter")
    p.add_argument("--param", required=True, help="dotted field path, e.g. model.T or impact.lambda")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--method", choices=("cara", "dp"), default="cara")
    p.add_argument("--L", type=int, help="override grid.L for --method dp")
    p.add_argument("--steps", type=int, default=200, help="benchmark time steps")

    p = sub.add_parser("plot", parents=[common], help="SVG figures")
    p.add_argument("--kind", choices=("value-vs-T", "heatmap", "convergence", "all"),
                   default="all")
    p.add_argument("--surface", help="surface file for heatmaps (default: solve now)")
    p.add_argument("--layers", help="comma-separated layer indices for heatmaps")
    p.add_argument("--L", type=int, help="override grid.L")
    return parser


_COMMANDS = {"validate": cmd_validate, "solve-cara": cmd_solve_cara, "solve-dp": cmd_solve_dp,
             "simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep,
             "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError, lio.SurfaceFormatError, PolicyDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CaraConvergenceError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
