"""Plain-text artifact formats: CSV tables, headed field dumps and PGM masks."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .cell_corrector import PermeabilityKernel
from .geometry import ConfigurationError

FORMAT_VERSION = 1
KERNEL_COLUMNS = ("t", "A11", "A12", "A21", "A22")


def _fmt(x):
    return repr(float(x))


def write_csv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_kernel_csv(path, kernel: PermeabilityKernel):
    return write_csv(path, KERNEL_COLUMNS, kernel.csv_rows())


def read_kernel_csv(path, fluid_fraction=None):
    """Inverse of :func:`write_kernel_csv`; ``|Y_f|`` defaults to ``A11(0)``."""
    header, rows = read_csv(path)
    if tuple(header) != KERNEL_COLUMNS:
        raise ConfigurationError(f"{path}: expected columns {','.join(KERNEL_COLUMNS)}")
    data = np.array(rows, dtype=float)
    A = data[:, 1:].reshape(-1, 2, 2)
    yf = float(A[0, 0, 0]) if fluid_fraction is None else fluid_fraction
    return PermeabilityKernel(data[:, 0], A, yf)


def synthetic_kernel(name, times):
    """Named kernels ``"identity"`` and ``"exp:<rate>"``."""
    times = np.asarray(times, float)
    if name == "identity":
        a = np.ones_like(times)
    elif name.startswith("exp:"):
        try:
            rate = float(name[4:])
        except ValueError:
            raise ConfigurationError(f"bad kernel rate in {name!r}") from None
        a = np.exp(-rate * times)
    else:
        raise ConfigurationError(f"unknown synthetic kernel {name!r}")
    return PermeabilityKernel(times.copy(), a[:, None, None] * np.eye(2), 1.0)


def write_field(path, array, **header):
    """Flat text grid preceded by one JSON header line.

    Arrays of rank above 2 are stored column-major (first index fastest) with
    their shape in the header, so tensors indexed ``(k, i, j, ...)`` round-trip.
    """
    a = np.asarray(array, float)
    head = {"format": FORMAT_VERSION, "shape": list(a.shape), "order": "F", **header}
    flat = a.reshape(a.shape[0], -1, order="F") if a.ndim == 2 else a.reshape(-1, 1, order="F")
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        np.savetxt(fh, flat, fmt="%.17g")
    return path


def read_field(path):
    path = Path(path)
    with path.open() as fh:
        head = json.loads(fh.readline())
        data = np.loadtxt(fh, ndmin=2)
    return data.reshape(head["shape"], order="F"), head


def write_pgm(path, mask):
    """ASCII graymap: fluid 255, solid 0, row ``j`` from the top (y up)."""
    img = np.where(np.asarray(mask, bool), 255, 0).T[::-1]
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in img]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path):
    tokens = [t for line in Path(path).read_text().splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ConfigurationError(f"{path}: not an ASCII graymap")
    w, h, vmax = map(int, tokens[1:4])
    img = np.array(tokens[4:4 + w * h], int).reshape(h, w)
    return (img[::-1].T * 2 > vmax)


def write_plot_data(path, eps, errors):
    """Two columns: log(eps), log(error)."""
    data = np.column_stack([np.log(np.asarray(eps, float)), np.log(np.asarray(errors, float))])
    path = Path(path)
    np.savetxt(path, data, fmt="%.17g", header="log_eps log_error")
    return path


def write_energy_csv(path, rows):
    return write_csv(path, ("t", "kinetic", "dissipation"), rows)


def write_json(path, data):
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")
