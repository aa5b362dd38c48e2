"""Scenario documents (JSON) and their translation into model objects.

Every error raised while reading a document is a :class:`ConfigError` whose
message starts with the dotted path of the offending field, e.g. ``model.b``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .dp import SolverGrid
from .mc import SimConfig
from .model import (Cara, DimensionError, ExpMixture, MarketModel, NotAUtilityError, PowerLaw,
                    Utility, validate_model)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_SCHEMA = {
    "model": {"d": int, "m": int, "sigma": list, "b": list, "T": float, "X0": list,
              "R0": float},
    "impact": {"kind": str, "lambda": float, "p": float},
    "utility": {"kind": str, "A": float, "weights": list, "rates": list, "shift": float},
    "grid": {"L": int, "x_box": list, "N_r": float, "J": int, "K": int, "xi_max": float,
             "q": float, "r_center": float},
    "sim": {"n_paths": int, "steps": int, "seed": int, "antithetic": bool},
    "verify": {"concavity_segments": int, "bellman_nodes": int, "bellman_layers": int,
               "pathwise_paths": int, "pathwise_pairs": int, "cara_steps": int,
               "refine": bool, "continuity_L": int, "continuity_terms": int},
    "output": {"dir": str},
}
_REQUIRED = {"model": ("sigma", "b", "T", "X0"), "impact": ("kind", "lambda"),
             "utility": ("kind",)}
_OPTIONAL_NULL = {"grid.xi_max", "sim.steps", "utility.shift"}


def default_document() -> dict:
    text = resources.files("liquidation").joinpath("data/default_scenario.json").read_text()
    return json.loads(text)


def _check_types(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for block, value in doc.items():
        if block not in _SCHEMA:
            raise ConfigError(block, "unknown key")
        if not isinstance(value, dict):
            raise ConfigError(block, "expected an object")
        for key, v in value.items():
            path = f"{block}.{key}"
            if key not in _SCHEMA[block]:
                raise ConfigError(path, "unknown key")
            want = _SCHEMA[block][key]
            if v is None:
                if path not in _OPTIONAL_NULL:
                    raise ConfigError(path, "may not be null")
                continue
            if want is float:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            elif want is int:
                ok = isinstance(v, int) and not isinstance(v, bool)
            else:
                ok = isinstance(v, want)
            if not ok:
                raise ConfigError(path, f"expected {want.__name__}, got {type(v).__name__}")
    for block, keys in _REQUIRED.items():
        if block not in doc:
            raise ConfigError(block, "missing block")
        for key in keys:
            if key not in doc[block]:
                raise ConfigError(f"{block}.{key}", "missing")


def _array(path, value, ndim):
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected numbers") from None
    if a.ndim != ndim:
        raise ConfigError(path, f"expected a {ndim}-dimensional array")
    if not np.all(np.isfinite(a)):
        raise ConfigError(path, "non-finite entries")
    return a


@dataclass(frozen=True)
class VerifySettings:
    concavity_segments: int = 1000
    bellman_nodes: int = 200
    bellman_layers: int = 8
    pathwise_paths: int = 10_000
    pathwise_pairs: int = 10
    cara_steps: int = 32
    refine: bool = True
    continuity_L: int = 5
    continuity_terms: int = 6


@dataclass(frozen=True)
class Scenario:
    """A fully built scenario: every object the solvers and checks need."""

    model: MarketModel
    impact: PowerLaw
    utility: Utility
    X0: np.ndarray
    R0: float
    T: float
    grid: SolverGrid
    grid_args: dict
    sim: SimConfig
    verify: VerifySettings
    out_dir: str
    document: dict

    def with_utility(self, utility: Utility) -> "Scenario":
        return Scenario(self.model, self.impact, utility, self.X0, self.R0, self.T, self.grid,
                        self.grid_args, self.sim, self.verify, self.out_dir, self.document)

    def with_grid(self, **changes) -> "Scenario":
        args = dict(self.grid_args, **changes)
        T = args.pop("T", self.T)
        grid = SolverGrid.build(T, self.X0, **args)
        args_out = dict(self.grid_args, **{k: v for k, v in changes.items() if k != "T"})
        return Scenario(self.model, self.impact, self.utility, self.X0, self.R0, T, grid,
                        args_out, self.sim, self.verify, self.out_dir, self.document)


def build_scenario(doc: dict, seed: int | None = None, threads: int = 1) -> Scenario:
    """Validate a scenario document and build the objects it describes."""
    doc = copy.deepcopy(doc)
    _check_types(doc)
    mb = doc["model"]
    sigma = _array("model.sigma", mb["sigma"], 2)
    b = _array("model.b", mb["b"], 1)
    X0 = _array("model.X0", mb["X0"], 1)
    T = float(mb["T"])
    if not T > 0:
        raise ConfigError("model.T", "horizon must be positive")
    d = mb.get("d", sigma.shape[0])
    m = mb.get("m", sigma.shape[1])
    if sigma.shape != (d, m):
        raise ConfigError("model.sigma", f"shape {sigma.shape} does not match (d, m) = ({d}, {m})")
    if b.size != d:
        raise ConfigError("model.b", f"length {b.size} does not match d = {d}")
    if X0.size != d:
        raise ConfigError("model.X0", f"length {X0.size} does not match d = {d}")
    try:
        model = MarketModel(sigma, b, T_max=T)
    except DimensionError as exc:
        raise ConfigError("model.sigma", str(exc)) from None
    report = validate_model(model)
    for item in report.failures():
        path = {"drift_in_range": "model.b", "horizon_positive": "model.T"}.get(
            item.name, "model.sigma")
        raise ConfigError(path, f"{item.name} failed (residual {item.residual:.3g})")

    ib = doc["impact"]
    if ib["kind"] not in ("power_law", "quadratic"):
        raise ConfigError("impact.kind", f"unknown impact kind {ib['kind']!r}")
    p = 2.0 if ib["kind"] == "quadratic" else float(ib.get("p", 2.0))
    if ib["kind"] == "quadratic" and ib.get("p", 2.0) != 2.0:
        raise ConfigError("impact.p", "quadratic impact has p = 2")
    if not ib["lambda"] > 0:
        raise ConfigError("impact.lambda", "must be positive")
    if not p > 1:
        raise ConfigError("impact.p", "exponent must exceed 1")
    impact = PowerLaw(float(ib["lambda"]), p)

    ub = doc["utility"]
    try:
        if ub["kind"] == "cara":
            if "A" not in ub:
                raise ConfigError("utility.A", "missing")
            if not ub["A"] > 0:
                raise ConfigError("utility.A", "risk aversion must be positive")
            utility = Cara(float(ub["A"]))
        elif ub["kind"] == "exp_mixture":
            for key in ("weights", "rates"):
                if key not in ub:
                    raise ConfigError(f"utility.{key}", "missing")
            utility = ExpMixture(_array("utility.weights", ub["weights"], 1),
                                 _array("utility.rates", ub["rates"], 1), ub.get("shift"))
        else:
            raise ConfigError("utility.kind", f"unknown utility kind {ub['kind']!r}")
    except NotAUtilityError as exc:
        raise ConfigError("utility", str(exc)) from None

    gb = doc.get("grid", {})
    grid_args = {k: gb[k] for k in ("L", "N_r", "J", "K", "xi_max", "q", "r_center") if k in gb}
    if "x_box" in gb:
        box = _array("grid.x_box", gb["x_box"], 2)
        if box.shape != (d, 3):
            raise ConfigError("grid.x_box", f"expected {d} rows of [lo, hi, step]")
        grid_args["x_box"] = [tuple(row) for row in box.tolist()]
    for key, lo in (("L", 1), ("J", 1), ("K", 1)):
        if key in grid_args and grid_args[key] < lo:
            raise ConfigError(f"grid.{key}", f"must be at least {lo}")
    if "N_r" in grid_args and not grid_args["N_r"] > 0:
        raise ConfigError("grid.N_r", "must be positive")
    try:
        grid = SolverGrid.build(T, X0, **grid_args)
    except ValueError as exc:
        raise ConfigError("grid.x_box", str(exc)) from None
    for k, ax in enumerate(grid.x_axes):
        if not ax[0] - 1e-12 <= X0[k] <= ax[-1] + 1e-12:
            raise ConfigError("grid.x_box", f"initial inventory {X0[k]} outside axis {k}")

    sb = doc.get("sim", {})
    try:
        sim = SimConfig(n_paths=sb.get("n_paths", 10_000), steps=sb.get("steps"),
                        seed=sb.get("seed", 0) if seed is None else seed,
                        antithetic=sb.get("antithetic", False), threads=threads)
    except ValueError as exc:
        raise ConfigError("sim", str(exc)) from None

    vb = doc.get("verify", {})
    verify = VerifySettings(**vb)
    for key, value in vb.items():
        if isinstance(value, int) and not isinstance(value, bool) and value < 1:
            raise ConfigError(f"verify.{key}", "must be at least 1")

    out_dir = doc.get("output", {}).get("dir", "out")
    return Scenario(model, impact, utility, X0, float(mb.get("R0", 0.0)), T, grid, grid_args,
                    sim, verify, out_dir, doc)


def load_scenario(path: str | Path | None = None, seed: int | None = None,
                  threads: int = 1) -> Scenario:
    """Read and build a scenario; ``None`` gives the shipped default."""
    if path is None:
        doc = default_document()
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError("<root>", f"cannot read {path}: {exc}") from None
    return build_scenario(doc, seed=seed, threads=threads)
