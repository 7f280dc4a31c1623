"""Planet constants and the unitless system used for every internal computation.

Time, distance, velocity and acceleration are divided by the planet-derived
factors in :class:`ScaleSet`; angles are left in radians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidConstantsError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalConstants:
    g_earth: float = 9.81
    R_earth: float = 6378e3
    omega_earth: float = 7.292e-5
    rho_sl: float = 1.225
    H_scale: float = 7000.0

    def __post_init__(self):
        for name in ("g_earth", "R_earth", "omega_earth", "rho_sl", "H_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidConstantsError(f"{name} must be positive and finite, got {value!r}")

    @property
    def beta(self) -> float:
        """Inverse atmospheric scale height [1/m]."""
        return 1.0 / self.H_scale


@dataclass(frozen=True)
class ScaleSet:
    time_scale: float
    length_scale: float
    velocity_scale: float
    accel_scale: float


def make_scales(constants: PhysicalConstants | None = None) -> ScaleSet:
    c = PhysicalConstants() if constants is None else constants
    if c.g_earth <= 0 or c.R_earth <= 0:
        raise InvalidConstantsError("g_earth and R_earth must be positive")
    time_scale = math.sqrt(c.R_earth / c.g_earth)
    return ScaleSet(
        time_scale=time_scale,
        length_scale=c.R_earth,
        # keeps velocity_scale * time_scale == length_scale bit-for-bit in the common case
        velocity_scale=c.R_earth / time_scale,
        accel_scale=c.g_earth,
    )


UNIT_KINDS = ("time", "distance", "velocity", "acceleration", "angle", "angular_rate")


def _factor(kind: str, scales: ScaleSet) -> float:
    if kind == "time":
        return scales.time_scale
    if kind == "distance":
        return scales.length_scale
    if kind == "velocity":
        return scales.velocity_scale
    if kind == "acceleration":
        return scales.accel_scale
    if kind == "angle":
        return 1.0
    if kind == "angular_rate":
        # rad/s -> rad per unit time
        return 1.0 / scales.time_scale
    raise ValueError(f"unknown unit kind {kind!r}; expected one of {UNIT_KINDS}")


def nondimensionalize(value, kind: str, scales: ScaleSet | None = None):
    """Divide a dimensional value (SI units, radians) by its scale factor."""
    s = make_scales() if scales is None else scales
    return value / _factor(kind, s)


def redimensionalize(value, kind: str, scales: ScaleSet | None = None):
    s = make_scales() if scales is None else scales
    return value * _factor(kind, s)
