"""Conversion between dimensionless and SI quantities.

All scales derive from four characteristic values: force ``f_c`` [N],
microscale length ``d`` [m], macroscale length ``L`` [m] and viscosity
``mu_c`` [Pa s]::

    displacement   L
    stress         f_c / L**2          (also pressure and traction)
    time           L**4 mu_c / (f_c d**2)
    velocity       f_c d**2 / (L**3 mu_c)
    conductivity   velocity / (stress / L) = d**2 / mu_c

The conductivity factor maps ``K`` in ``w = -K grad p`` and is obtained
from the velocity and pressure-gradient scales.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

KINDS = {
    "displacement": "m",
    "velocity": "m/s",
    "stress": "Pa",
    "pressure": "Pa",
    "traction": "Pa",
    "time": "s",
    "conductivity": "m^2/(Pa s)",
}


@dataclass(frozen=True)
class CharacteristicSet:
    force: float
    micro_length: float
    macro_length: float
    viscosity: float
    name: str = "custom"

    def __post_init__(self):
        for key in ("force", "micro_length", "macro_length", "viscosity"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if self.epsilon >= 1.0:
            raise ValueError(f"scale separation d/L = {self.epsilon:g} must be below 1")
        if self.epsilon > 0.1:
            warnings.warn(f"weak scale separation: d/L = {self.epsilon:g}", stacklevel=2)

    @property
    def epsilon(self):
        return self.micro_length / self.macro_length

    @property
    def stress_scale(self):
        return self.force / self.macro_length**2

    @property
    def time_scale(self):
        return self.macro_length**4 * self.viscosity / (self.force * self.micro_length**2)

    @property
    def velocity_scale(self):
        return self.force * self.micro_length**2 / (self.macro_length**3 * self.viscosity)

    @property
    def conductivity_scale(self):
        return self.velocity_scale * self.macro_length / self.stress_scale

    def scale(self, kind):
        if kind not in KINDS:
            raise ValueError(f"unknown quantity kind {kind!r}; expected one of {sorted(KINDS)}")
        if kind == "displacement":
            return self.macro_length
        if kind in ("stress", "pressure", "traction"):
            return self.stress_scale
        return getattr(self, f"{kind}_scale")

    def as_dict(self):
        return {"name": self.name, "force": self.force, "micro_length": self.micro_length,
                "macro_length": self.macro_length, "viscosity": self.viscosity}


PRESETS = {
    "brain": CharacteristicSet(1e-3, 2e-6, 1e-3, 1.0, name="brain"),
    "soil": CharacteristicSet(1.5e6, 2e-4, 1.0, 1.0, name="soil"),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


def dimensionalize(kind, value, chars):
    """Return ``(value * scale, unit)`` for a dimensionless ``value``."""
    return value * chars.scale(kind), KINDS[kind]


def nondimensionalize(kind, value, chars):
    return value / chars.scale(kind)


def format_quantity(value, unit):
    return f"{value:.6g} {unit}"
