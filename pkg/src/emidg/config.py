"""YAML run configuration for the one-shot ``solve`` driver.

Top-level keys: ``case``, ``level``, ``geometry``, ``degree``, ``epsilon``,
``gamma``, ``coefficients``, ``membrane``, ``bc``, ``time``, ``solver``,
``outputs``.  Errors name the offending key path, e.g. ``epsilon``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


GEOMETRIES = ("square", "plus_cell", "lshape", "two_cell", "strip_cell", "strip_chain", "sheet")
MEMBRANE_MODELS = ("passive", "aliev_panfilov", "sheet")
BC_MODES = ("neumann", "dirichlet")
CASES = ("onecell", "lowreg", "twocell")

SCHEMA = {
    "case": None, "s": None, "level": None, "geometry": {"name", "resolution", "params", "diagonal",
                                                          "mesh_file"},
    "degree": None, "epsilon": None, "gamma": None,
    "coefficients": {"kappa", "capacitance", "kappa_penalty"},
    "membrane": {"model", "c", "R_G", "E_G", "stimulus"},
    "bc": {"mode"},
    "time": {"T", "steps", "tau"},
    "solver": {"method", "tol"},
    "outputs": {"vtk", "vtk_every", "probes"},
}


def _check_keys(data, allowed, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _number(data, key, path, default=None, positive=False, integer=False):
    if key not in data:
        if default is None:
            raise ConfigError(path, "required")
        return default
    v = data[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(path, f"must be positive, got {v!r}")
    return int(v) if integer else float(v)


def _choice(data, key, path, choices, default):
    v = data.get(key, default)
    if v not in choices:
        raise ConfigError(path, f"must be one of {list(choices)}, got {v!r}")
    return v


def _pair(key, path):
    if isinstance(key, (list, tuple)) and len(key) == 2:
        return int(key[0]), int(key[1])
    try:
        a, b = str(key).split(",")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(path, f"interface keys look like '1,0', got {key!r}") from None


@dataclass
class RunConfig:
    case: str | None = None
    s: float = 0.5
    level: int = 0
    geometry: dict = field(default_factory=lambda: {"name": "plus_cell", "resolution": 8,
                                                    "params": {}, "diagonal": "left"})
    degree: int = 1
    epsilon: int = 1
    gamma: float = 20.0
    kappa: dict = field(default_factory=dict)
    capacitance: object = 1.0
    kappa_penalty: bool = True
    membrane: dict = field(default_factory=lambda: {"model": "passive", "c": 0.0})
    bc: str = "neumann"
    T: float | None = None
    steps: int | None = None
    solver: str = "direct"
    tol: float = 1e-10
    vtk: bool = True
    vtk_every: int = 0
    probes: bool = False

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        if isinstance(d["capacitance"], dict):
            d["capacitance"] = {f"{a},{b}": c for (a, b), c in d["capacitance"].items()}
        return d


def parse(data) -> RunConfig:
    """Validate a mapping and resolve defaults."""
    if data is None:
        data = {}
    _check_keys(data, SCHEMA)
    for key, sub in SCHEMA.items():
        if sub is not None and key in data:
            _check_keys(data[key], sub, f"{key}.")
    cfg = RunConfig()
    if "case" in data:
        cfg.case = _choice(data, "case", "case", CASES, None)
        cfg.s = _number(data, "s", "s", 0.5)
        if not 0 < cfg.s < 1:
            raise ConfigError("s", "must lie in (0, 1)")
    cfg.level = _number(data, "level", "level", 0, integer=True)
    if cfg.level < 0:
        raise ConfigError("level", "must be non-negative")
    cfg.degree = _number(data, "degree", "degree", 1, integer=True)
    if not 1 <= cfg.degree <= 3:
        raise ConfigError("degree", f"must be 1, 2 or 3, got {cfg.degree}")
    eps = data.get("epsilon", 1)
    if isinstance(eps, bool) or eps not in (-1, 0, 1):
        raise ConfigError("epsilon", f"must be -1, 0 or 1, got {eps!r}")
    cfg.epsilon = int(eps)
    cfg.gamma = _number(data, "gamma", "gamma", 20.0, positive=True)

    geo = data.get("geometry", {})
    if "mesh_file" in geo:
        p = Path(geo["mesh_file"])
        if not p.is_file():
            raise ConfigError("geometry.mesh_file", f"no such file {str(p)!r}")
        cfg.geometry = {"mesh_file": str(p)}
    else:
        cfg.geometry = {
            "name": _choice(geo, "name", "geometry.name", GEOMETRIES, "plus_cell"),
            "resolution": _number(geo, "resolution", "geometry.resolution", 8, positive=True,
                                  integer=True),
            "params": dict(geo.get("params", {}) or {}),
            "diagonal": _choice(geo, "diagonal", "geometry.diagonal", ("left", "right"), "left"),
        }

    coef = data.get("coefficients", {})
    kappa = coef.get("kappa", {})
    if not isinstance(kappa, dict):
        raise ConfigError("coefficients.kappa", "expected a mapping label -> value")
    for lab, val in kappa.items():
        path = f"coefficients.kappa.{lab}"
        try:
            int(lab)
        except (TypeError, ValueError):
            raise ConfigError(path, "subdomain labels must be integers") from None
        if isinstance(val, list):
            if len(val) != 2 or any(not isinstance(r, list) or len(r) != 2 for r in val):
                raise ConfigError(path, "tensor must be a 2x2 nested list")
        elif isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0:
            raise ConfigError(path, f"must be a positive number or 2x2 tensor, got {val!r}")
    cfg.kappa = {int(k): v for k, v in kappa.items()}
    cap = coef.get("capacitance", 1.0)
    if isinstance(cap, dict):
        cfg.capacitance = {}
        for key, val in cap.items():
            path = f"coefficients.capacitance.{key}"
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0:
                raise ConfigError(path, f"must be positive, got {val!r}")
            cfg.capacitance[_pair(key, path)] = float(val)
    else:
        cfg.capacitance = _number(coef, "capacitance", "coefficients.capacitance", 1.0,
                                  positive=True)
    kp = coef.get("kappa_penalty", True)
    if not isinstance(kp, bool):
        raise ConfigError("coefficients.kappa_penalty", "expected true or false")
    cfg.kappa_penalty = kp

    mem = data.get("membrane", {})
    model = _choice(mem, "model", "membrane.model", MEMBRANE_MODELS, "passive")
    cfg.membrane = {"model": model}
    if model == "passive":
        cfg.membrane["c"] = _number(mem, "c", "membrane.c", 0.0)
        if cfg.membrane["c"] < 0:
            raise ConfigError("membrane.c", "must be non-negative")
    if model == "sheet":
        cfg.membrane["R_G"] = _number(mem, "R_G", "membrane.R_G", 0.05, positive=True)
        cfg.membrane["E_G"] = _number(mem, "E_G", "membrane.E_G", 0.0)
    if model != "passive":
        stim = mem.get("stimulus", {}) or {}
        _check_keys(stim, {"amplitude", "start", "stop", "cells", "selector"}, "membrane.stimulus.")
        cells = stim.get("cells", [])
        if not isinstance(cells, list) or not all(isinstance(c, int) for c in cells):
            raise ConfigError("membrane.stimulus.cells", "expected a list of cell labels")
        cfg.membrane["stimulus"] = {
            "amplitude": _number(stim, "amplitude", "membrane.stimulus.amplitude", 50.0),
            "start": _number(stim, "start", "membrane.stimulus.start", 5.0),
            "stop": _number(stim, "stop", "membrane.stimulus.stop", 15.0),
            "selector": _choice(stim, "selector", "membrane.stimulus.selector",
                                ("all", "none", "bottom"), "all" if not cells else "bottom"),
            "cells": cells,
        }

    cfg.bc = _choice(data.get("bc", {}), "mode", "bc.mode", BC_MODES, "neumann")

    t = data.get("time", {})
    if "T" in t:
        cfg.T = _number(t, "T", "time.T", positive=True)
    if "steps" in t and "tau" in t:
        raise ConfigError("time", "give either steps or tau, not both")
    if "steps" in t:
        cfg.steps = _number(t, "steps", "time.steps", integer=True, positive=True)
    elif "tau" in t:
        tau = _number(t, "tau", "time.tau", positive=True)
        if cfg.T is None:
            raise ConfigError("time.T", "required when time.tau is given")
        cfg.steps = max(1, round(cfg.T / tau))
    if cfg.case is None and (cfg.T is None or cfg.steps is None):
        raise ConfigError("time", "T and steps (or tau) are required without a case")

    sol = data.get("solver", {})
    cfg.solver = _choice(sol, "method", "solver.method", ("direct", "cg"), "direct")
    cfg.tol = _number(sol, "tol", "solver.tol", 1e-10, positive=True)

    out = data.get("outputs", {})
    cfg.vtk = bool(out.get("vtk", True))
    cfg.vtk_every = _number(out, "vtk_every", "outputs.vtk_every", 0, integer=True)
    cfg.probes = bool(out.get("probes", False))
    return cfg


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {str(path)!r}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from exc
    return parse(data)
