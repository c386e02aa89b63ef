"""Run configuration: nested sections with defaults and collected validation.

A configuration file is YAML with any subset of the sections below; missing
values fall back to the defaults.  ``load_config`` validates everything and
raises a single ``ConfigError`` listing each problem with its section path.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .exceptions import ConfigError

# (default, type, check, description)
SCHEMA = {
    "geometry": {
        "resolution": (24, int, lambda v: v >= 8, "voxels per cell edge (>= 8)"),
        "channel_radius": (0.2, float, lambda v: 0 < v < 0.5, "channel radius on the unit cell, in (0, 0.5)"),
    },
    "material": {
        "poisson_ratio": (0.35, float, lambda v: -1 < v < 0.5, "Poisson ratio of the solid, in (-1, 0.5)"),
    },
    "fluid": {
        "viscosity": (1e-3, float, lambda v: v > 0, "dimensionless fluid viscosity (> 0)"),
        "beta_coef": (0.1, float, lambda v: v >= 0, "pressure stabilisation weight (>= 0)"),
        "consistent": (True, bool, None, "carry the body force into the stabilisation term"),
    },
    "solid": {
        "n_increments": (20, int, lambda v: v >= 1, "load increments of a cell solve from rest"),
        "delta": (1e-6, float, lambda v: v > 0, "finite-difference step of the tangents"),
        "grad_u0": ([0.0] * 9, list, lambda v: len(v) == 9, "macro displacement gradient, row-major (9 values)"),
        "p0": (0.0, float, None, "macro pore pressure"),
    },
    "sweep": {
        "component": ("22", str, lambda v: v in ("11", "12", "13", "21", "22", "23", "31", "32", "33", "p"),
                      "swept input: '11'..'33' or 'p'"),
        "start": (0.0, float, None, "first value"),
        "stop": (-0.3, float, None, "last value"),
        "num": (16, int, lambda v: v >= 2, "number of values (>= 2)"),
    },
    "sampler": {
        "grad_range": ([-0.35, 0.05], list, lambda v: len(v) == 2 and v[0] < v[1], "[lo, hi] of grad_u0_22"),
        "p_range": ([0.0, 0.2], list, lambda v: len(v) == 2 and v[0] < v[1], "[lo, hi] of p0"),
        "grad_step": (0.02, float, lambda v: v > 0, "default step along grad_u0_22"),
        "p_step": (0.02, float, lambda v: v > 0, "default step along p0"),
        "tol": (1e-3, float, lambda v: v > 0, "extrapolation residual tolerance"),
        "max_depth": (6, int, lambda v: v >= 0, "maximum bisection depth"),
    },
    "training": {
        "hidden_layer_sizes": ([32, 32], list, lambda v: len(v) >= 1 and all(int(k) > 0 for k in v),
                               "hidden layer widths"),
        "learning_rate": (1e-3, float, lambda v: v > 0, "Adam step size"),
        "max_epochs": (20000, int, lambda v: v >= 1, "epoch limit"),
        "tol": (1e-8, float, lambda v: v > 0, "stop when the cost falls below this"),
        "seed": (0, int, None, "seed of the initial weights and the held-out split"),
        "holdout": (0.1, float, lambda v: 0 <= v < 1, "held-out fraction"),
        "gate": (1e-3, float, lambda v: v > 0, "held-out max abs error allowed for macro use"),
    },
    "macro": {
        "load": (-0.2, float, None, "top traction (negative: compression)"),
        "dt": (1.0, float, lambda v: v > 0, "time step after the load ramp"),
        "t_end": (1000.0, float, lambda v: v > 0, "end time if steady state is not reached"),
        "height": (7.5, float, lambda v: v > 0, "column height"),
        "breadth": (0.1, float, lambda v: v > 0, "column breadth"),
        "divisions": ([1, 30, 1], list, lambda v: len(v) == 3 and all(int(k) >= 1 for k in v),
                      "cells along x, y (height), z"),
        "n_ramp": (10, int, lambda v: v >= 1, "load ramp increments (each dt / n_ramp)"),
        "steady_tol": (1e-9, float, lambda v: v > 0, "relative settlement change per step at steady state"),
        "provider": ("surrogate", str, lambda v: v in ("surrogate", "cell", "rigid"), "micro response source"),
        "solver": ("ale", str, lambda v: v in ("ale", "linear"), "finite-strain model or linear reference"),
        "stabilization": (0.5, float, lambda v: v >= 0, "pressure-increment stabilisation weight (times h^2 over the modulus)"),
        "refresh": ("converged", str, lambda v: v in ("converged", "iteration"), "when the micro response is re-evaluated"),
        "profile_every": (10, int, lambda v: v >= 1, "steps between recorded profiles"),
    },
    "scaling": {
        "preset": ("brain", str, None, "characteristic set: a preset name or 'custom'"),
        "force": (None, float, lambda v: v is None or v > 0, "custom f_c [N]"),
        "micro_length": (None, float, lambda v: v is None or v > 0, "custom d [m]"),
        "macro_length": (None, float, lambda v: v is None or v > 0, "custom L [m]"),
        "viscosity": (None, float, lambda v: v is None or v > 0, "custom mu_c [Pa s]"),
    },
}


def defaults():
    return {sec: {k: copy.deepcopy(v[0]) for k, v in fields.items()} for sec, fields in SCHEMA.items()}


def _coerce(value, kind):
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise TypeError("expected true/false")
    if kind is int:
        if isinstance(value, bool) or not float(value).is_integer():
            raise TypeError("expected an integer")
        return int(value)
    if kind is float:
        if isinstance(value, bool):
            raise TypeError("expected a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if kind is list:
        if not isinstance(value, (list, tuple)):
            raise TypeError("expected a list")
        return [float(v) if isinstance(v, float) else v for v in value]
    return value


def validate(raw):
    """Merge ``raw`` over the defaults; raise ``ConfigError`` with every problem."""
    cfg = defaults()
    problems = []
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: expected a mapping of sections"])
    for sec, body in raw.items():
        if sec not in SCHEMA:
            problems.append(f"{sec}: unknown section")
            continue
        if body is None:
            continue
        if not isinstance(body, dict):
            problems.append(f"{sec}: expected a mapping")
            continue
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                problems.append(f"{sec}.{key}: unknown field")
                continue
            _, kind, check, desc = SCHEMA[sec][key]
            try:
                v = _coerce(value, kind)
            except (TypeError, ValueError) as exc:
                problems.append(f"{sec}.{key}: {exc} ({desc})")
                continue
            try:
                ok = check is None or v is None and SCHEMA[sec][key][0] is None or check(v)
            except (TypeError, ValueError):
                ok = False
            if not ok:
                problems.append(f"{sec}.{key}: invalid value {value!r} ({desc})")
                continue
            cfg[sec][key] = v
    sc = cfg["scaling"]
    if sc["preset"] == "custom":
        missing = [k for k in ("force", "micro_length", "macro_length", "viscosity") if sc[k] is None]
        problems += [f"scaling.{k}: required for a custom preset" for k in missing]
    else:
        from .scaling import PRESETS

        if sc["preset"] not in PRESETS:
            problems.append(f"scaling.preset: unknown preset {sc['preset']!r} (available: {sorted(PRESETS)}, custom)")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"<file>: not valid YAML: {exc}"]) from None
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        raw.setdefault(sec, {})[key] = value
    return validate(raw)


def characteristic_set(cfg):
    from .scaling import CharacteristicSet, get_preset

    sc = cfg["scaling"]
    if sc["preset"] == "custom":
        return CharacteristicSet(sc["force"], sc["micro_length"], sc["macro_length"], sc["viscosity"])
    return get_preset(sc["preset"])


def describe():
    """Markdown table of every field with its default and meaning."""
    lines = ["| field | default | meaning |", "|---|---|---|"]
    for sec, fields in SCHEMA.items():
        for key, (default, _, _, desc) in fields.items():
            lines.append(f"| `{sec}.{key}` | `{default}` | {desc} |")
    return "\n".join(lines) + "\n"
