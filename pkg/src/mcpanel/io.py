"""CSV and config-file formats for panels, fitted parameters and run manifests.

Layout of a panel directory::

    Y.csv   N x T, no header
    W.csv   N x T 0/1, no header
    X.csv   N x P with a header row of covariate names        (optional)
    Z.csv   Q x T with the covariate name in the first column (optional)
    V.csv   long format: unit,time,covariate,value            (optional)

Cells absent from the long-format V file are zero.
"""

from __future__ import annotations

import csv
import json
import os
import platform
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .panel import ModelParams, PanelData

PANEL_FILES = {"Y": "Y.csv", "W": "W.csv", "X": "X.csv", "Z": "Z.csv", "V": "V.csv"}


class InputFileError(ValueError):
    """A required input file is missing or malformed; the message names the file."""


def _fmt(v) -> str:
    # repr round-trips doubles exactly and is stable across runs
    return repr(float(v))


def write_dense(path, A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in A:
            w.writerow([_fmt(v) for v in row])


def read_dense(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"missing input file: {path}")
    try:
        with open(path, newline="") as fh:
            rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    except ValueError as exc:
        raise InputFileError(f"{path}: non-numeric entry ({exc})") from None
    if not rows:
        raise InputFileError(f"{path}: empty matrix")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise InputFileError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows)


def write_vector(path, name, values, labels=None):
    values = np.asarray(values, dtype=float)
    labels = labels if labels is not None else range(len(values))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", name])
        for lab, v in zip(labels, values):
            w.writerow([lab, _fmt(v)])


def read_vector(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([float(r[1]) for r in rows[1:] if r])


def write_x(path, X, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names))
        for row in X:
            w.writerow([_fmt(v) for v in row])


def read_x(path):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise InputFileError(f"{path}: missing header row")
    names = tuple(rows[0])
    try:
        X = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, len(names))
    except ValueError as exc:
        raise InputFileError(f"{path}: {exc}") from None
    return X, names


def write_z(path, Z, names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, row in zip(names, Z):
            w.writerow([name] + [_fmt(v) for v in row])


def read_z(path, T):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    names = tuple(r[0] for r in rows)
    try:
        Z = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), T)
    except ValueError as exc:
        raise InputFileError(f"{path}: expected a name column plus {T} values per row ({exc})") from None
    return Z, names


def write_v(path, V, names):
    N, T, J = V.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "time", "covariate", "value"])
        for i in range(N):
            for t in range(T):
                for j in range(J):
                    w.writerow([i, t, names[j], _fmt(V[i, t, j])])


def read_v(path, N, T):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"unit", "time", "covariate", "value"} - set(reader.fieldnames or [])
        if missing:
            raise InputFileError(f"{path}: missing columns {sorted(missing)}")
        records = list(reader)
    names = []
    index = {}
    for r in records:
        if r["covariate"] not in index:
            index[r["covariate"]] = len(names)
            names.append(r["covariate"])
    V = np.zeros((N, T, len(names)))
    for r in records:
        i, t = int(r["unit"]), int(r["time"])
        if not (0 <= i < N and 0 <= t < T):
            raise InputFileError(f"{path}: cell ({i}, {t}) outside the {N} x {T} panel")
        V[i, t, index[r["covariate"]]] = float(r["value"])
    return V, tuple(names)


def read_panel(directory=None, **paths) -> PanelData:
    """Load a panel from `directory` and/or explicit per-file paths.

    Keyword arguments ``Y``, ``W``, ``X``, ``Z``, ``V`` override the
    default file names inside `directory`. Y and W are required.
    """
    resolved = {}
    for key, fname in PANEL_FILES.items():
        p = paths.get(key)
        if p is None and directory is not None:
            cand = Path(directory) / fname
            if key in ("Y", "W") or cand.exists():
                p = cand
        resolved[key] = p
    for key in ("Y", "W"):
        if resolved[key] is None:
            raise InputFileError(f"no {key} file given")
    Y = read_dense(resolved["Y"])
    W = read_dense(resolved["W"])
    N, T = Y.shape
    kw = {}
    if resolved["X"] is not None:
        kw["X"], kw["x_names"] = read_x(resolved["X"])
    if resolved["Z"] is not None:
        kw["Z"], kw["z_names"] = read_z(resolved["Z"], T)
    if resolved["V"] is not None:
        kw["V"], kw["v_names"] = read_v(resolved["V"], N, T)
    return PanelData(Y, W, **kw)


def write_panel(directory, panel: PanelData):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_dense(d / "Y.csv", panel.Y)
    write_dense(d / "W.csv", panel.W)
    written = [d / "Y.csv", d / "W.csv"]
    x_names, z_names, v_names = panel.covariate_names
    if panel.P:
        write_x(d / "X.csv", panel.X, x_names)
        written.append(d / "X.csv")
    if panel.Q:
        write_z(d / "Z.csv", panel.Z, z_names)
        written.append(d / "Z.csv")
    if panel.J:
        write_v(d / "V.csv", panel.V, v_names)
        written.append(d / "V.csv")
    return written


def write_h_triplets(path, H, row_names, col_names):
    """Nonzero entries of `H` as ``(row_name, col_name, value)`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_name", "col_name", "value"])
        for p, q in zip(*np.nonzero(H)):
            w.writerow([row_names[p], col_names[q], _fmt(H[p, q])])


def read_h_triplets(path, row_names, col_names):
    rix = {n: i for i, n in enumerate(row_names)}
    cix = {n: i for i, n in enumerate(col_names)}
    H = np.zeros((len(row_names), len(col_names)))
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            H[rix[r["row_name"]], cix[r["col_name"]]] = float(r["value"])
    return H


def write_params(directory, params: ModelParams, panel: PanelData):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    x_names, z_names, v_names = panel.covariate_names
    write_dense(d / "L.csv", params.L)
    write_h_triplets(d / "H.csv", params.H, x_names, z_names)
    write_vector(d / "beta.csv", "beta", params.beta, v_names)
    write_vector(d / "Gamma.csv", "Gamma", params.Gamma)
    write_vector(d / "Delta.csv", "Delta", params.Delta)
    return [d / f for f in ("L.csv", "H.csv", "beta.csv", "Gamma.csv", "Delta.csv")]


def read_params(directory, panel: PanelData) -> ModelParams:
    d = Path(directory)
    for f in ("L.csv", "H.csv", "beta.csv", "Gamma.csv", "Delta.csv"):
        if not (d / f).is_file():
            raise InputFileError(f"missing fitted parameter file: {d / f}")
    x_names, z_names, _ = panel.covariate_names
    beta = read_vector(d / "beta.csv") if panel.J else np.zeros(0)
    return ModelParams(
        read_dense(d / "L.csv").reshape(panel.shape),
        read_h_triplets(d / "H.csv", x_names, z_names),
        beta,
        read_vector(d / "Gamma.csv"),
        read_vector(d / "Delta.csv"),
    )


def write_rows(path, rows, columns=None):
    """Write dict rows as CSV; floats are written with ``repr``."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in (r.get(c, "") for c in columns)])


# --- config files -------------------------------------------------------------


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Values stay strings."""
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"missing config file: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputFileError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_config(path, values: dict):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")


# --- manifests ----------------------------------------------------------------


def software_version() -> str:
    from . import __version__

    return __version__


def write_manifest(directory, command, config, seeds, outputs, started):
    """Write ``manifest.json`` describing how the directory was produced."""
    d = Path(directory)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "software_version": software_version(),
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "started": started,
        "finished": now(),
        "outputs": sorted(os.path.relpath(p, d) for p in outputs),
    }
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return d / "manifest.json"


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
