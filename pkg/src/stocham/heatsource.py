"""Cylindrical Gaussian heat source with energy-density and RHF coupling.

Coefficients are stored in SI against the linear energy density
``e = P / V`` in J/m:

* ``d = P1 * e * rhf**2`` with P1 in m^2/J,
* ``eta = clip(P2 * e * rhf**2, eta_floor, 1)`` with P2 in m/J,
* ``r_b = P3 * e * rhf**2`` with P3 in m^2/J.

The surrogate works with e in J/mm, where the matching "mm units" are
P1 and P3 in mm^2/J and P2 in mm/J; :meth:`HeatSourceCoefficients.from_mm`
and :meth:`HeatSourceCoefficients.to_mm` convert.

Note that the symbol epsilon here is the source intensity factor, unrelated
to the surface emissivity in :mod:`stocham.material`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Any, Mapping

import numpy as np
from numba import njit

__all__ = [
    "HeatSourceCoefficients",
    "EffectiveSource",
    "effective_params",
    "volumetric_flux",
    "source_prefactor",
    "deposit",
]

# SI value of a coefficient given in mm units
MM_TO_SI = {"P1": 1e-6, "P2": 1e-3, "P3": 1e-6}


@dataclass(frozen=True)
class HeatSourceCoefficients:
    P1: float
    P2: float
    P3: float
    intensity_factor: float = 1.0
    eta_floor: float = 0.28

    def __post_init__(self) -> None:
        for name in ("P1", "P2", "P3", "intensity_factor"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 0 < self.eta_floor <= 1:
            raise ValueError("eta_floor must lie in (0, 1]")

    @classmethod
    def from_mm(cls, P1: float, P2: float, P3: float, **kw: Any) -> "HeatSourceCoefficients":
        return cls(P1 * MM_TO_SI["P1"], P2 * MM_TO_SI["P2"], P3 * MM_TO_SI["P3"], **kw)

    def to_mm(self) -> tuple[float, float, float]:
        return (self.P1 / MM_TO_SI["P1"], self.P2 / MM_TO_SI["P2"], self.P3 / MM_TO_SI["P3"])

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "HeatSourceCoefficients":
        """Config block; ``units: mm`` (default ``si``) selects the P scale."""
        data = dict(data)
        units = data.pop("units", "si")
        extra = set(data) - {"P1", "P2", "P3", "intensity_factor", "eta_floor"}
        if extra:
            raise KeyError(f"unknown heat_source keys: {sorted(extra)}")
        if units == "mm":
            P = {k: data.pop(k) for k in ("P1", "P2", "P3")}
            return cls.from_mm(**P, **data)
        if units != "si":
            raise ValueError("heat_source units must be 'si' or 'mm'")
        return cls(**data)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def replace(self, **kw: Any) -> "HeatSourceCoefficients":
        return replace(self, **kw)


@dataclass(frozen=True)
class EffectiveSource:
    eta: float
    r_b: float
    d: float
    power: float
    center: tuple[float, float] = (0.0, 0.0)
    z_top: float = 0.0
    intensity_factor: float = 1.0

    def __post_init__(self) -> None:
        if not (self.r_b > 0 and self.d > 0):
            raise ValueError("r_b and d must be positive")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")


def effective_params(P: float, V: float, rhf: float, coeffs: HeatSourceCoefficients) -> tuple[float, float, float]:
    """``(d, eta, r_b)`` for power ``P`` (W), speed ``V`` (m/s) and normalized RHF."""
    if not (P > 0 and V > 0):
        raise ValueError("power and speed must be positive")
    if not rhf > 0:
        raise ValueError("rhf must be positive")
    s = (P / V) * rhf * rhf
    eta = min(max(coeffs.P2 * s, coeffs.eta_floor), 1.0)
    return coeffs.P1 * s, eta, coeffs.P3 * s


def source_prefactor(src: EffectiveSource) -> float:
    return src.intensity_factor * src.power * src.eta / (np.pi * src.r_b ** 2 * src.d)


def volumetric_flux(query_point, source: EffectiveSource) -> float | np.ndarray:
    """Power density (W/m^3) at one or many ``(..., 3)`` query points."""
    q = np.asarray(query_point, dtype=float)
    xb = q[..., 0] - source.center[0]
    yb = q[..., 1] - source.center[1]
    depth = source.z_top - q[..., 2]
    inside = (depth <= source.d) & (depth >= 0.0)
    val = source_prefactor(source) * np.exp(-2.0 * (xb * xb + yb * yb) / source.r_b ** 2)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


@njit(cache=True, error_model="numpy")
def deposit(out, x, y, z_lo, z_hi, dx, dy, xc, yc, z_top, prefactor, r_b, d, i0, i1, j0, j1, k0, k1):
    """Add source power (W) per cell into ``out`` over an index window.

    Laterally the Gaussian is sampled at cell centers; vertically the
    overlap of each cell with ``[z_top - d, z_top]`` is integrated exactly.
    Returns the total power added.
    """
    total = 0.0
    inv = 2.0 / (r_b * r_b)
    zb = z_top - d
    area = dx * dy
    for k in range(k0, k1):
        lo = max(z_lo[k], zb)
        hi = min(z_hi[k], z_top)
        if hi <= lo:
            continue
        h = hi - lo
        for j in range(j0, j1):
            ry = y[j] - yc
            for i in range(i0, i1):
                rx = x[i] - xc
                w = prefactor * np.exp(-(rx * rx + ry * ry) * inv) * area * h
                out[i, j, k] += w
                total += w
    return total
