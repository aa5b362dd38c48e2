"""Deterministic SVG figures with the plotted data embedded as a comment.

Figures are built on :class:`matplotlib.figure.Figure` (no global pyplot
state); the SVG date is omitted and element ids are salted with a fixed
string, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure

from .dp import ValueSurface
from .io import jsonable

_STYLE = {"svg.hashsalt": "liquidation", "svg.fonttype": "none", "font.size": 9,
          "axes.spines.top": False, "axes.spines.right": False}


def _svg(fig: Figure, data: dict) -> str:
    buf = io.StringIO()
    with mpl.rc_context(_STYLE):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    text = buf.getvalue()
    comment = json.dumps(jsonable(data), sort_keys=True).replace("--", "- -")
    head, sep, rest = text.partition("?>\n")
    if not sep:
        return f"<!-- data: {comment} -->\n" + text
    return head + sep + f"<!-- data: {comment} -->\n" + rest


def _figure(size=(5.0, 3.4)):
    with mpl.rc_context(_STYLE):
        fig = Figure(figsize=size)
        ax = fig.add_subplot()
    return fig, ax


def value_vs_horizon(horizons, curves: dict, ylabel: str = "value") -> str:
    """One line per entry of ``curves`` (label -> values at ``horizons``)."""
    T = np.asarray(horizons, dtype=float)
    with mpl.rc_context(_STYLE):
        fig, ax = _figure()
        for label in sorted(curves):
            ax.plot(T, np.asarray(curves[label], dtype=float), marker="o", ms=3, label=label)
        ax.set_xlabel("horizon T")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
    return _svg(fig, {"kind": "value_vs_horizon", "T": T, "curves": curves})


def layer_heatmap(surface: ValueSurface, layer: int) -> str:
    """``log(sup - V)`` over (x, r) on one layer of a one-asset surface."""
    g = surface.grid
    if g.d != 1:
        raise ValueError("heatmaps are drawn for one-asset surfaces only")
    z = surface.log_gap[layer]
    x, r = g.x_axes[0], g.r_grid
    with mpl.rc_context(_STYLE):
        fig, ax = _figure()
        masked = np.ma.masked_invalid(z.T)
        mesh = ax.pcolormesh(x, r, masked, shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="log(sup u - V)")
        ax.set_xlabel("inventory x")
        ax.set_ylabel("revenue r")
        ax.set_title(f"remaining time {layer * g.dt:.4g}")
        fig.tight_layout()
    return _svg(fig, {"kind": "layer_heatmap", "layer": layer, "tau": layer * g.dt,
                      "x": x, "r": r, "log_gap": z})


def convergence(levels, errors: dict, xlabel: str = "grid level L",
                ylabel: str = "relative error") -> str:
    """Errors against refinement level on a log scale, one line per entry."""
    Ls = np.asarray(levels)
    with mpl.rc_context(_STYLE):
        fig, ax = _figure()
        for label in sorted(errors):
            ax.semilogy(Ls, np.abs(np.asarray(errors[label], dtype=float)), marker="s", ms=3,
                        label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
    return _svg(fig, {"kind": "convergence", "levels": Ls, "errors": errors})


def write_svg(text: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
