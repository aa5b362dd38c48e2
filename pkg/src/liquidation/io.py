"""Persistence of surfaces and simulation results.

Surface files are a flat binary dump::

    b"LIQSURF1\\n"
    8-byte little-endian header length
    header: UTF-8 JSON (sorted keys) with grid, model, impact and utility
            metadata plus name, dtype, shape, offset and SHA-256 of each array
    the arrays, C-ordered little-endian, in header order

Nothing time-dependent is written, so equal surfaces give equal files.  CSV
output follows RFC 4180 (CRLF line ends, minimal quoting, header row) with
floats in shortest round-trip form.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .dp import SolverGrid, ValueSurface
from .mc import SimResult
from .model import Cara, ExpMixture, MarketModel, PowerLaw, Utility

MAGIC = b"LIQSURF1\n"
FORMAT_VERSION = 1


class SurfaceFormatError(ValueError):
    pass


# -- utility and model descriptions -------------------------------------------------


def describe_utility(u: Utility) -> dict:
    if isinstance(u, Cara):
        return {"kind": "cara", "A": u.A}
    if isinstance(u, ExpMixture):
        return {"kind": "exp_mixture", "weights": u.weights.tolist(), "rates": u.rates.tolist(),
                "shift": u.shift}
    raise SurfaceFormatError(f"utility {u!r} has no serial form")


def utility_from_description(desc: dict) -> Utility:
    if desc["kind"] == "cara":
        return Cara(desc["A"])
    if desc["kind"] == "exp_mixture":
        return ExpMixture(desc["weights"], desc["rates"], desc["shift"])
    raise SurfaceFormatError(f"unknown utility kind {desc['kind']!r}")


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


# -- surfaces -----------------------------------------------------------------------


def surface_bytes(surface: ValueSurface) -> bytes:
    g = surface.grid
    arrays = {"r_grid": np.asarray(g.r_grid, dtype=float),
              "log_gap": surface.log_gap, "choice": surface.choice.astype(np.int32),
              "rates": surface.rates, "layer_residuals": surface.layer_residuals}
    for k, ax in enumerate(g.x_axes):
        arrays[f"x_axis_{k}"] = np.asarray(ax, dtype=float)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = _le(np.asarray(arrays[name]))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_VERSION,
        "grid": {"L": g.L, "T": g.T, "xi_max": g.xi_max, "J": g.J, "K": g.K, "q": g.q,
                 "d": g.d},
        "model": {"sigma": surface.model.sigma.tolist(), "b": surface.model.b.tolist(),
                  "T_max": surface.model.T_max},
        "impact": {"lambda": surface.impact.lam, "p": surface.impact.p},
        "utility": describe_utility(surface.utility),
        "sup": surface.sup,
        "clamps": int(surface.clamps),
        "evaluations": int(surface.evaluations),
        "content_hash": surface.content_hash(),
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def write_surface(surface: ValueSurface, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(surface_bytes(surface))
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read(len(MAGIC) + 8)
        if data[:len(MAGIC)] != MAGIC:
            raise SurfaceFormatError(f"{path}: not a surface file")
        (n,) = struct.unpack("<Q", data[len(MAGIC):])
        return json.loads(fh.read(n))


def read_surface(path) -> ValueSurface:
    """Rebuild a surface written by :func:`write_surface`; hashes are checked."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise SurfaceFormatError(f"{path}: not a surface file")
    (n,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + n])
    if header.get("format") != FORMAT_VERSION:
        raise SurfaceFormatError(f"{path}: unsupported format {header.get('format')}")
    body = memoryview(blob)[start + n:]
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        size = int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize
        raw = bytes(body[e["offset"]:e["offset"] + size])
        if len(raw) != size or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise SurfaceFormatError(f"{path}: array {e['name']} is truncated or corrupt")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(
            dtype.newbyteorder("="))
    gh = header["grid"]
    axes = []
    for k in range(gh["d"]):
        ax = arrays[f"x_axis_{k}"]
        ax.setflags(write=False)
        axes.append(ax)
    r = arrays["r_grid"]
    r.setflags(write=False)
    grid = SolverGrid(L=gh["L"], T=gh["T"], x_axes=tuple(axes), r_grid=r, xi_max=gh["xi_max"],
                      J=gh["J"], K=gh["K"], q=gh["q"])
    mh = header["model"]
    model = MarketModel(np.array(mh["sigma"]), np.array(mh["b"]), T_max=mh["T_max"])
    impact = PowerLaw(header["impact"]["lambda"], header["impact"]["p"])
    utility = utility_from_description(header["utility"])
    surface = ValueSurface(grid, model, impact, utility, arrays["log_gap"], arrays["choice"],
                           arrays["rates"], header["sup"], header["clamps"],
                           header["evaluations"], np.zeros(grid.n_layers + 1),
                           arrays["layer_residuals"])
    if surface.content_hash() != header["content_hash"]:
        raise SurfaceFormatError(f"{path}: content hash mismatch")
    return surface


def jsonable(obj):
    """Plain JSON types; non-finite floats become their ``repr`` strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# -- CSV ----------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(header, rows))
    return path


def surface_rows(surface: ValueSurface):
    """Header and row iterator of the node table: one row per (layer, x, r)."""
    g = surface.grid
    d = g.d
    header = (["layer", "tau"] + [f"x{k + 1}" for k in range(d)]
              + ["r", "value", "log_gap", "choice", "feasible"] + [f"rate{k + 1}" for k in range(d)])
    X = g.x_nodes
    values = surface.values

    def rows():
        for n in range(g.n_layers + 1):
            tau = float(n * g.dt)
            for i in range(X.shape[0]):
                xs = [float(v) for v in X[i]]
                for j, r in enumerate(g.r_grid):
                    ok = bool(np.isfinite(surface.log_gap[n, i, j]))
                    yield ([n, tau] + xs + [float(r), float(values[n, i, j]),
                                            float(surface.log_gap[n, i, j]),
                                            int(surface.choice[n, i, j]), int(ok)]
                           + [float(v) for v in surface.rates[n, i, j]])

    return header, rows()


def sim_rows(result: SimResult):
    header = ["path", "R_T", "impact_budget", "fuel_residual"]
    rows = ((i, float(result.samples[i]), float(result.budget[i]), float(result.fuel_residual[i]))
            for i in range(result.n_paths))
    return header, rows
