"""Versioned JSON run configuration."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .cell_corrector import TimeGrid
from .geometry import CellGeometry, ConfigurationError

SCHEMA_VERSION = 1

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "geometry": {
        "obstacle_shape": "square",
        "obstacle_extent": 0.25,
        "n_cell": 32,
        # every period cell that fits inside the box keeps its obstacle
        "kappa0": 0.25,
    },
    # graded grid for the kernel and its diagnostics
    "kernel_time": {"T": 2.0, "M": 128, "gamma": 2.0},
    # uniform grid shared by the cell trajectories, Darcy and fine solves
    "time": {"T": 2.0, "M": 64, "gamma": 1.0},
    "forcing": {"name": "ramp", "amplitude": 1.0},
    "sweep": {"epsilons": [0.25, 0.125, 0.0625], "layer_epsilons": [0.125, 0.0625]},
    "tolerances": {
        "linear": 1e-10,
        "min_slope": 0.4,
        "layer_factor": 2 ** 0.4,
        "contraction": 0.6,
        "divergence": 1e-6,
        "uniformity": 2.0,
    },
    "output": "artifact-out",
}

_FORCINGS = ("ramp", "gradient", "zero")


class ConfigError(ConfigurationError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(key, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(key, "expected an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _number(cfg, section, name, kind=float, positive=True):
    key = f"{section}.{name}"
    v = cfg[section][name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(key, f"must be positive, got {v!r}")
    return kind(v)


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls.from_dict({})
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data):
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version!r}")
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    def validate(self):
        r = self.raw
        g = r["geometry"]
        _number(r, "geometry", "n_cell", int)
        _number(r, "geometry", "kappa0")
        try:
            self.cell
        except ConfigurationError as exc:
            raise ConfigError("geometry", str(exc)) from exc
        if g["obstacle_shape"] not in ("square", "disk"):
            raise ConfigError("geometry.obstacle_shape", f"unknown shape {g['obstacle_shape']!r}")
        for block in ("kernel_time", "time"):
            _number(r, block, "T")
            _number(r, block, "M", int)
            if _number(r, block, "gamma") < 1:
                raise ConfigError(f"{block}.gamma", "must be >= 1")
        if r["time"]["gamma"] != 1:
            raise ConfigError("time.gamma", "the shared macro grid must be uniform (gamma = 1)")
        if r["forcing"]["name"] not in _FORCINGS:
            raise ConfigError("forcing.name", f"expected one of {_FORCINGS}")
        _number(r, "forcing", "amplitude", positive=False)
        for name in ("epsilons", "layer_epsilons"):
            key = f"sweep.{name}"
            eps = r["sweep"][name]
            if not isinstance(eps, list) or not all(isinstance(e, (int, float)) for e in eps):
                raise ConfigError(key, "expected a list of numbers")
            for e in eps:
                if not 0 < e < 1:
                    raise ConfigError(key, f"epsilon {e!r} outside (0, 1)")
                inv = Fraction(1 / e).limit_denominator(1000)
                if inv.denominator != 1 or abs(float(inv) - 1 / e) > 1e-9:
                    raise ConfigError(key, f"epsilon {e!r} is not grid-commensurate (1/epsilon not an integer)")
            if len(set(eps)) != len(eps):
                raise ConfigError(key, "duplicate epsilon")
        if len(r["sweep"]["epsilons"]) < 3:
            raise ConfigError("sweep.epsilons", "rate fits need at least 3 values")
        for name in r["tolerances"]:
            _number(r, "tolerances", name)
        if not isinstance(r["output"], str) or not r["output"]:
            raise ConfigError("output", "expected a directory name")

    @property
    def cell(self):
        g = self.raw["geometry"]
        return CellGeometry(g["obstacle_shape"], float(g["obstacle_extent"]), int(g["n_cell"]))

    @property
    def kappa0(self):
        return float(self.raw["geometry"]["kappa0"])

    @property
    def kernel_grid(self):
        t = self.raw["kernel_time"]
        return TimeGrid(float(t["T"]), int(t["M"]), float(t["gamma"]))

    @property
    def time_grid(self):
        t = self.raw["time"]
        return TimeGrid(float(t["T"]), int(t["M"]), float(t["gamma"]))

    @property
    def epsilons(self):
        return [float(e) for e in self.raw["sweep"]["epsilons"]]

    @property
    def layer_epsilons(self):
        return [float(e) for e in self.raw["sweep"]["layer_epsilons"]]

    @property
    def tol(self):
        return dict(self.raw["tolerances"])

    def section_hash(self, *sections):
        """Content hash of the listed config blocks, used as a cache key."""
        blob = json.dumps({s: self.raw[s] for s in sections}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dumps(self):
        return json.dumps(self.raw, indent=2, sort_keys=True)
