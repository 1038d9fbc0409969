"""Run configuration: a TOML document with five sections.

Every key has an explicit default that is filled in at load time, so the
resolved configuration echoed in reports lists each parameter used.
Unknown sections and keys are rejected to catch typos early.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import tomli

from .errors import ConfigError
from .fields import BUILTIN_NAMES

SECTIONS = ("grid", "fields", "solver", "experiment", "output")

_DEFAULTS = {
    "grid": {"mask": None, "nonbox_heuristic": False},
    "fields": {"builtin": None, "dimension": None, "fields": None, "weight": None},
    "solver": {
        "tol": 1e-8,
        "eig_tol": 1e-6,
        "maxiter": 3000,
        "gap_floor": None,
        "kernel_tol": 1e-8,
        "kmax": 16,
        "seed": 0,
        "threads": 1,
    },
    "experiment": {
        "rho0": "1",
        "rho1": "1",
        "steps": 64,
        "c": None,
        "residual_threshold": None,
        "particles": 0,
        "substeps": 8,
        "seed": 0,
        "y": None,
        "R": 0.2,
        "alpha": None,
        "reach_threshold": 0.99,
        "reverse": False,
        "samples": 2000,
        "path": None,
    },
    "output": {
        "dir": "out",
        "dump_grid": False,
        "dump_operator": False,
        "dump_controls": False,
        "dump_eigenvector": False,
        "dump_trajectories": False,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration, one dict per section."""

    grid: dict
    fields: dict
    solver: dict
    experiment: dict
    output: dict

    def as_dict(self) -> dict:
        return {name: copy.deepcopy(getattr(self, name)) for name in SECTIONS}


def _number(section, key, value, positive=False, integer=False, minimum=None):
    kind = int if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"[{section}] {key} must be {'an integer' if integer else 'a number'}")
    if not math.isfinite(value):
        raise ConfigError(f"[{section}] {key} must be finite")
    if positive and value <= 0:
        raise ConfigError(f"[{section}] {key} must be > 0, got {value}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"[{section}] {key} must be >= {minimum}, got {value}")
    return value


def _vector(section, key, value, length=None):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"[{section}] {key} must be a non-empty list of numbers")
    out = [float(_number(section, key, v)) for v in value]
    if length is not None and len(out) != length:
        raise ConfigError(f"[{section}] {key} needs {length} entries, got {len(out)}")
    return out


def _merge(doc: dict) -> dict:
    extra = set(doc) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(extra))}")
    merged = {}
    for name in SECTIONS:
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{name}] must be a table")
        allowed = set(_DEFAULTS[name]) | ({"box", "resolution"} if name == "grid" else set())
        unknown = set(given) - allowed
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        section = copy.deepcopy(_DEFAULTS[name])
        section.update(copy.deepcopy(given))
        merged[name] = section
    return merged


def _resolve_grid(g: dict) -> int:
    if "box" not in g or "resolution" not in g:
        raise ConfigError("[grid] needs 'box' and 'resolution'")
    box = g["box"]
    if not isinstance(box, list) or len(box) != 2:
        raise ConfigError("[grid] box must be [[lower...], [upper...]]")
    g["box"] = [_vector("grid", "box", box[0]), _vector("grid", "box", box[1])]
    d = len(g["box"][0])
    if len(g["box"][1]) != d:
        raise ConfigError("[grid] box corners differ in dimension")
    res = g["resolution"]
    if not isinstance(res, list) or len(res) != d:
        raise ConfigError(f"[grid] resolution needs {d} node counts")
    g["resolution"] = [_number("grid", "resolution", n, integer=True, minimum=3) for n in res]
    if g["mask"] is not None:
        if not isinstance(g["mask"], str):
            raise ConfigError("[grid] mask must be an expression string")
        if g["nonbox_heuristic"] is not True:
            raise ConfigError(
                "[grid] a mask makes the run heuristic; set nonbox_heuristic = true to acknowledge"
            )
    return d


def _resolve_fields(f: dict, d: int):
    has_builtin = f["builtin"] is not None
    has_expr = f["fields"] is not None
    if has_builtin == has_expr:
        raise ConfigError("[fields] needs exactly one of 'builtin' or 'fields'")
    if has_builtin:
        if f["builtin"] not in BUILTIN_NAMES:
            raise ConfigError(
                f"[fields] unknown builtin {f['builtin']!r}; valid options: {', '.join(BUILTIN_NAMES)}"
            )
        if f["dimension"] is not None:
            raise ConfigError("[fields] 'dimension' only applies to expression fields")
    else:
        if f["dimension"] is None:
            f["dimension"] = d
        _number("fields", "dimension", f["dimension"], integer=True, minimum=1)
        if f["dimension"] != d:
            raise ConfigError(f"[fields] dimension {f['dimension']} differs from grid dimension {d}")
        if not isinstance(f["fields"], list) or not f["fields"]:
            raise ConfigError("[fields] fields must be a non-empty list (m >= 1)")
    if f["weight"] is not None and not isinstance(f["weight"], str):
        raise ConfigError("[fields] weight must be an expression string")


def _resolve_solver(s: dict):
    for key in ("tol", "eig_tol", "kernel_tol"):
        _number("solver", key, s[key], positive=True)
    if s["gap_floor"] is not None:
        _number("solver", "gap_floor", s["gap_floor"], positive=True)
    for key in ("maxiter", "kmax", "threads"):
        _number("solver", key, s[key], integer=True, minimum=1)
    _number("solver", "seed", s["seed"], integer=True, minimum=0)


def _resolve_experiment(e: dict, d: int, volume: float, tol: float):
    for key in ("rho0", "rho1"):
        if not isinstance(e[key], str):
            raise ConfigError(f"[experiment] {key} must be an expression string")
    for key in ("steps", "substeps"):
        _number("experiment", key, e[key], integer=True, minimum=1)
    for key in ("particles", "seed"):
        _number("experiment", key, e[key], integer=True, minimum=0)
    _number("experiment", "samples", e["samples"], integer=True, minimum=1)
    if e["c"] is None:
        e["c"] = 1e-3 / volume
    _number("experiment", "c", e["c"], minimum=0)
    if e["residual_threshold"] is None:
        e["residual_threshold"] = 10 * tol
    _number("experiment", "residual_threshold", e["residual_threshold"], positive=True)
    _number("experiment", "R", e["R"], positive=True)
    if e["alpha"] is None:
        e["alpha"] = (e["R"] / 3.0) ** 2
    _number("experiment", "alpha", e["alpha"], positive=True)
    _number("experiment", "reach_threshold", e["reach_threshold"], minimum=0)
    if e["y"] is not None:
        e["y"] = _vector("experiment", "y", e["y"], d)
    if not isinstance(e["reverse"], bool):
        raise ConfigError("[experiment] reverse must be true or false")
    if e["path"] is not None:
        path = e["path"]
        if not isinstance(path, list) or len(path) < 2:
            raise ConfigError("[experiment] path needs at least two {t, rho} entries")
        for item in path:
            if not isinstance(item, dict) or set(item) != {"t", "rho"}:
                raise ConfigError("[experiment] every path entry needs exactly 't' and 'rho'")
            item["t"] = float(_number("experiment", "path.t", item["t"]))
            if not isinstance(item["rho"], str):
                raise ConfigError("[experiment] path rho must be an expression string")


def _resolve_output(o: dict):
    if not isinstance(o["dir"], str) or not o["dir"]:
        raise ConfigError("[output] dir must be a non-empty string")
    for key, value in o.items():
        if key.startswith("dump_") and not isinstance(value, bool):
            raise ConfigError(f"[output] {key} must be true or false")


def resolve_config(doc: dict) -> RunConfig:
    """Validate a parsed document and fill in every default."""
    merged = _merge(doc)
    d = _resolve_grid(merged["grid"])
    _resolve_fields(merged["fields"], d)
    _resolve_solver(merged["solver"])
    lo, hi = merged["grid"]["box"]
    volume = math.prod(b - a for a, b in zip(lo, hi))
    if volume <= 0:
        raise ConfigError("[grid] box is degenerate: need lower < upper on every axis")
    _resolve_experiment(merged["experiment"], d, volume, merged["solver"]["tol"])
    _resolve_output(merged["output"])
    return RunConfig(**merged)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    return resolve_config(doc)
