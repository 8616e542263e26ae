"""IN625 thermophysical properties, phase fraction, enthalpy and consolidation.

Every property is a function of temperature ``T`` (K) and of the consolidation
factor ``alpha`` (0 = loose powder, 1 = fully consolidated bulk). Between the
two states properties are blended linearly in ``alpha``. Inside the mushy
range the "bulk" state itself is a linear solid/liquid blend weighted by the
liquid fraction, and the effective consolidation used for blending is
``max(alpha, f_l(T))`` so that molten material always carries liquid values.

Two enthalpies live here and they are not the same quantity:

* :func:`enthalpy` is the specific enthalpy (J/kg) of the material, sensible
  heat from ``T_reference`` plus ``L * f_l``.
* :func:`volumetric_enthalpy` is the per-volume energy content (J/m^3) the
  field solver conserves, ``E = int rho (c + L f_l') dT``. It is strictly
  increasing in ``T`` for any fixed ``alpha`` and is inverted per cell by
  :func:`temperature_from_volumetric_enthalpy`.

Symbol clash note: the emissivity here and the heat-source intensity factor
are both written epsilon in the literature; this module only owns the
emissivity. Likewise ``convection_coeff`` is the film coefficient, unrelated to
the enthalpy ``h`` or a KDE bandwidth.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from numba import njit

__all__ = [
    "MaterialProperties",
    "IN625",
    "liquid_fraction",
    "consolidation_factor",
    "effective_property",
    "enthalpy",
    "temperature_from_enthalpy",
    "volumetric_enthalpy",
    "temperature_from_volumetric_enthalpy",
]


@dataclass(frozen=True)
class MaterialProperties:
    """Thermophysical constants of the alloy and the process environment.

    Values and units follow the property table of the source data, with two
    exceptions that are converted on use: ``latent_heat`` is stored in kJ/kg
    and ``stefan_boltzmann`` in W mm^-2 K^-4. ``convection_coeff`` is taken as
    a film coefficient in W m^-2 K^-1 (the table header prints W m^-1 K^-1).
    """

    rho_solid: float = 8440.0
    rho_liquid: float = 7640.0
    rho_powder: float = 4330.0
    T_solidus: float = 1563.0
    T_liquidus: float = 1623.0
    cp_solid_poly: tuple[float, float] = (0.2441, 338.39)
    cp_powder_poly: tuple[float, float] = (0.2508, 357.70)
    cp_liquid: float = 709.25
    k_solid_poly: tuple[float, float] = (0.0163, 4.5847)
    k_liquid: float = 30.078
    k_powder: float = 0.995
    latent_heat: float = 290.0
    viscosity: float = 7e-3
    thermal_expansivity: float = 5e-5
    surface_tension: float = 1.8
    marangoni_coeff: float = -3.8e-4
    emissivity: float = 0.4
    convection_coeff: float = 10.0
    T_ambient: float = 295.0
    T_reference: float = 295.0
    T_preheat: float = 353.0
    stefan_boltzmann: float = 5.67e-14
    dendrite_spacing: float = 1e-6
    darcy_epsilon: float = 1e-6
    gravity: float = 9.8
    # lower end of the temperature range the polynomials were fitted on
    T_poly_min: float = 295.0

    def __post_init__(self) -> None:
        for name in ("cp_solid_poly", "cp_powder_poly", "k_solid_poly"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2:
                raise ValueError(f"{name} must be (slope, intercept)")
            object.__setattr__(self, name, value)
        if not self.T_solidus < self.T_liquidus:
            raise ValueError("T_solidus must be below T_liquidus")
        for name in ("rho_solid", "rho_liquid", "rho_powder", "latent_heat", "viscosity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.T_poly_min >= self.T_liquidus:
            raise ValueError("T_poly_min must be below T_liquidus")

    @property
    def latent_heat_si(self) -> float:
        """Latent heat of fusion in J/kg."""
        return self.latent_heat * 1e3

    @property
    def stefan_boltzmann_si(self) -> float:
        """Stefan-Boltzmann constant in W m^-2 K^-4."""
        return self.stefan_boltzmann * 1e6

    def replace(self, **overrides: Any) -> "MaterialProperties":
        return dataclasses.replace(self, **overrides)

    @classmethod
    def from_mapping(cls, overrides: Mapping[str, Any] | None = None) -> "MaterialProperties":
        """Build from a config ``material`` block; unknown keys are rejected."""
        overrides = dict(overrides or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise KeyError(f"unknown material keys: {unknown}; valid keys: {sorted(known)}")
        return cls(**overrides)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for name in ("cp_solid_poly", "cp_powder_poly", "k_solid_poly"):
            out[name] = list(out[name])
        return out

    def as_array(self) -> np.ndarray:
        """Pack into the flat float64 layout consumed by the jitted kernels."""
        p = np.zeros(_NPARAM)
        p[_TS] = self.T_solidus
        p[_TL] = self.T_liquidus
        p[_RS] = self.rho_solid
        p[_RL] = self.rho_liquid
        p[_RP] = self.rho_powder
        p[_CS1], p[_CS0] = self.cp_solid_poly
        p[_CP1], p[_CP0] = self.cp_powder_poly
        p[_CL] = self.cp_liquid
        p[_KS1], p[_KS0] = self.k_solid_poly
        p[_KL] = self.k_liquid
        p[_KP] = self.k_powder
        p[_LAT] = self.latent_heat_si
        p[_TMIN] = self.T_poly_min
        p[_TREF] = self.T_reference
        return p


IN625 = MaterialProperties()

# kernel parameter layout
(_TS, _TL, _RS, _RL, _RP, _CS1, _CS0, _CP1, _CP0, _CL,
 _KS1, _KS0, _KL, _KP, _LAT, _TMIN, _TREF, _NPARAM) = range(18)

_GL_X = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GL_W = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


# ---------------------------------------------------------------------------
# scalar kernels (numba); the public numpy API below wraps these
# ---------------------------------------------------------------------------

@njit(cache=True, error_model="numpy")
def k_liquid_fraction(T, p):
    if T <= p[_TS]:
        return 0.0
    if T >= p[_TL]:
        return 1.0
    return (T - p[_TS]) / (p[_TL] - p[_TS])


@njit(cache=True, error_model="numpy")
def k_consolidation(T_peak, p):
    a = (T_peak - p[_TS]) / (p[_TL] - p[_TS])
    if a < 0.0:
        return 0.0
    if a > 1.0:
        return 1.0
    return a


@njit(cache=True, error_model="numpy")
def _clamp_poly(T, p):
    if T < p[_TMIN]:
        return p[_TMIN]
    if T > p[_TL]:
        return p[_TL]
    return T


@njit(cache=True, error_model="numpy")
def k_conductivity(T, alpha, p):
    f = k_liquid_fraction(T, p)
    ae = alpha if alpha > f else f
    Tc = _clamp_poly(T, p)
    kb = (1.0 - f) * (p[_KS1] * Tc + p[_KS0]) + f * p[_KL]
    return ae * kb + (1.0 - ae) * p[_KP]


@njit(cache=True, error_model="numpy")
def k_specific_heat(T, alpha, p):
    f = k_liquid_fraction(T, p)
    ae = alpha if alpha > f else f
    Tc = _clamp_poly(T, p)
    cb = (1.0 - f) * (p[_CS1] * Tc + p[_CS0]) + f * p[_CL]
    return ae * cb + (1.0 - ae) * (p[_CP1] * Tc + p[_CP0])


@njit(cache=True, error_model="numpy")
def k_density(T, alpha, p):
    f = k_liquid_fraction(T, p)
    ae = alpha if alpha > f else f
    rb = (1.0 - f) * p[_RS] + f * p[_RL]
    return ae * rb + (1.0 - ae) * p[_RP]


@njit(cache=True, error_model="numpy")
def _int_clamped_linear(c1, c0, Tmin, Ta, Tb):
    """Integral of c1*max(T, Tmin) + c0 from Ta to Tb (Ta <= Tb, Tb <= T_l)."""
    total = 0.0
    if Ta < Tmin:
        lo_end = Tb if Tb < Tmin else Tmin
        total += (c1 * Tmin + c0) * (lo_end - Ta)
        Ta = lo_end
    if Tb > Ta:
        total += 0.5 * c1 * (Tb * Tb - Ta * Ta) + c0 * (Tb - Ta)
    return total


@njit(cache=True, error_model="numpy")
def _int_signed(c1, c0, Tmin, Ta, Tb):
    if Tb >= Ta:
        return _int_clamped_linear(c1, c0, Tmin, Ta, Tb)
    return -_int_clamped_linear(c1, c0, Tmin, Tb, Ta)


@njit(cache=True, error_model="numpy")
def _solid_E(T, alpha, p):
    # rho is constant below solidus, so E = rho_a * int c_a dT
    rho = alpha * p[_RS] + (1.0 - alpha) * p[_RP]
    c1 = alpha * p[_CS1] + (1.0 - alpha) * p[_CP1]
    c0 = alpha * p[_CS0] + (1.0 - alpha) * p[_CP0]
    return rho * _int_signed(c1, c0, p[_TMIN], p[_TREF], T)


@njit(cache=True, error_model="numpy")
def k_dEdT(T, alpha, p):
    """Volumetric heat capacity including the latent contribution."""
    lat = 0.0
    if p[_TS] < T < p[_TL]:
        lat = p[_LAT] / (p[_TL] - p[_TS])
    return k_density(T, alpha, p) * (k_specific_heat(T, alpha, p) + lat)


@njit(cache=True, error_model="numpy")
def _gl_int(Ta, Tb, alpha, p):
    if Tb <= Ta:
        return 0.0
    half = 0.5 * (Tb - Ta)
    mid = 0.5 * (Tb + Ta)
    s = 0.0
    for q in range(3):
        s += _GL_W[q] * k_dEdT(mid + half * _GL_X[q], alpha, p)
    return half * s


@njit(cache=True, error_model="numpy")
def _mushy_E(T, alpha, p, Es):
    # integrand is polynomial on each side of the kink at f_l = alpha
    Ta = p[_TS] + alpha * (p[_TL] - p[_TS])
    if T <= Ta:
        return Es + _gl_int(p[_TS], T, alpha, p)
    return Es + _gl_int(p[_TS], Ta, alpha, p) + _gl_int(Ta, T, alpha, p)


@njit(cache=True, error_model="numpy")
def k_volumetric_enthalpy(T, alpha, p):
    Es = _solid_E(p[_TS], alpha, p)
    if T <= p[_TS]:
        return _solid_E(T, alpha, p)
    if T < p[_TL]:
        return _mushy_E(T, alpha, p, Es)
    El = _mushy_E(p[_TL], alpha, p, Es)
    return El + p[_RL] * p[_CL] * (T - p[_TL])


@njit(cache=True, error_model="numpy")
def _solid_T_from_E(E, alpha, p):
    rho = alpha * p[_RS] + (1.0 - alpha) * p[_RP]
    c1 = alpha * p[_CS1] + (1.0 - alpha) * p[_CP1]
    c0 = alpha * p[_CS0] + (1.0 - alpha) * p[_CP0]
    Tmin = p[_TMIN]
    Tref = p[_TREF]
    g = E / rho  # target of int_{Tref}^{T} c dT
    g_min = _int_signed(c1, c0, Tmin, Tref, Tmin)
    if g <= g_min:
        # constant-c branch below the polynomial range
        return Tmin + (g - g_min) / (c1 * Tmin + c0)
    # 0.5 c1 (T^2 - Tmin^2) + c0 (T - Tmin) = g - g_min
    rhs = g - g_min + 0.5 * c1 * Tmin * Tmin + c0 * Tmin
    if c1 == 0.0:
        return rhs / c0
    disc = c0 * c0 + 2.0 * c1 * rhs
    return (-c0 + np.sqrt(disc)) / c1


@njit(cache=True, error_model="numpy")
def k_temperature_from_E(E, alpha, p, T_guess):
    Ts = p[_TS]
    Tl = p[_TL]
    # the solid branch is monotone, so it lands below Ts exactly when E <= E(Ts)
    T = _solid_T_from_E(E, alpha, p)
    if T <= Ts:
        return T
    Es = _solid_E(Ts, alpha, p)
    El = _mushy_E(Tl, alpha, p, Es)
    if E >= El:
        return Tl + (E - El) / (p[_RL] * p[_CL])
    # safeguarded Newton inside the mushy interval
    lo = Ts
    hi = Tl
    T = T_guess
    if not (lo < T < hi):
        T = Ts + (Tl - Ts) * (E - Es) / (El - Es)
    for _ in range(60):
        r = _mushy_E(T, alpha, p, Es) - E
        if r > 0.0:
            hi = T
        else:
            lo = T
        Tn = T - r / k_dEdT(T, alpha, p)
        if not (lo < Tn < hi):
            Tn = 0.5 * (lo + hi)
        if abs(Tn - T) < 1e-10:
            return Tn
        T = Tn
    return T


# ---------------------------------------------------------------------------
# public numpy API
# ---------------------------------------------------------------------------

def _vec(kernel, *args):
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args[:-1]])
    p = args[-1]
    out = np.empty(arrays[0].shape)
    flat = [a.ravel() for a in arrays]
    res = out.ravel()
    for i in range(res.size):
        res[i] = kernel(*[a[i] for a in flat], p)
    return out if out.ndim else float(out)


def liquid_fraction(T, props: MaterialProperties = IN625):
    """Liquid volume fraction, linear between solidus and liquidus."""
    T = np.asarray(T, dtype=float)
    f = np.clip((T - props.T_solidus) / (props.T_liquidus - props.T_solidus), 0.0, 1.0)
    return f if f.ndim else float(f)


def consolidation_factor(T_peak, props: MaterialProperties = IN625):
    """Consolidation state from the running peak temperature, clamped to [0, 1]."""
    return liquid_fraction(T_peak, props)


def effective_property(T, alpha, which: str, props: MaterialProperties = IN625):
    """Conductivity, specific heat or density for a powder/bulk mixture.

    Parameters
    ----------
    T : array_like
        Temperature (K).
    alpha : array_like
        Consolidation factor in [0, 1].
    which : {"conductivity", "specific_heat", "density"}
    """
    kernels = {
        "conductivity": k_conductivity,
        "specific_heat": k_specific_heat,
        "density": k_density,
    }
    try:
        kernel = kernels[which]
    except KeyError:
        raise ValueError(f"unknown property {which!r}; expected one of {sorted(kernels)}") from None
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    return _vec(kernel, T, alpha, props.as_array())


def enthalpy(T, props: MaterialProperties = IN625, alpha=1.0):
    """Specific enthalpy (J/kg): sensible heat from ``T_reference`` plus latent heat."""
    p = props.as_array()

    def one(t, a):
        lo, hi = (props.T_reference, t) if t >= props.T_reference else (t, props.T_reference)
        sign = 1.0 if t >= props.T_reference else -1.0
        return sign * _cp_integral(lo, hi, a, p) + props.latent_heat_si * k_liquid_fraction(t, p)

    T_arr, a_arr = np.broadcast_arrays(np.asarray(T, dtype=float), np.asarray(alpha, dtype=float))
    out = np.array([one(t, a) for t, a in zip(T_arr.ravel(), a_arr.ravel())]).reshape(T_arr.shape)
    return out if out.ndim else float(out)


def _cp_integral(lo: float, hi: float, alpha: float, p: np.ndarray) -> float:
    """Exact integral of the effective specific heat over [lo, hi]."""
    Ts, Tl, Tmin = p[_TS], p[_TL], p[_TMIN]
    total = 0.0
    # below solidus: clamped linear blend
    a, b = lo, min(hi, Ts)
    if b > a:
        c1 = alpha * p[_CS1] + (1 - alpha) * p[_CP1]
        c0 = alpha * p[_CS0] + (1 - alpha) * p[_CP0]
        total += _int_clamped_linear(c1, c0, Tmin, a, b)
    # mushy range: piecewise polynomial, split at the alpha kink
    a, b = max(lo, Ts), min(hi, Tl)
    if b > a:
        Tk = Ts + alpha * (Tl - Ts)
        for s, e in ((a, min(b, Tk)), (max(a, Tk), b)):
            if e > s:
                half, mid = 0.5 * (e - s), 0.5 * (e + s)
                total += half * sum(w * k_specific_heat(mid + half * x, alpha, p)
                                    for x, w in zip(_GL_X, _GL_W))
    a = max(lo, Tl)
    if hi > a:
        total += p[_CL] * (hi - a)
    return total


def temperature_from_enthalpy(h, props: MaterialProperties = IN625, alpha=1.0, tol=1e-9):
    """Invert :func:`enthalpy` by bracketed root finding."""
    from scipy.optimize import brentq

    def one(target, a):
        lo, hi = 1.0, 1e4
        return brentq(lambda t: enthalpy(t, props, a) - target, lo, hi, xtol=tol, rtol=1e-15)

    h_arr, a_arr = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(alpha, dtype=float))
    out = np.array([one(v, a) for v, a in zip(h_arr.ravel(), a_arr.ravel())]).reshape(h_arr.shape)
    return out if out.ndim else float(out)


def volumetric_enthalpy(T, alpha, props: MaterialProperties = IN625):
    """Energy content per unit volume (J/m^3) relative to ``T_reference``."""
    return _vec(k_volumetric_enthalpy, T, alpha, props.as_array())


def temperature_from_volumetric_enthalpy(E, alpha, props: MaterialProperties = IN625):
    """Temperature whose :func:`volumetric_enthalpy` equals ``E`` at fixed ``alpha``."""
    p = props.as_array()

    def kern(e, a, p):
        return k_temperature_from_E(e, a, p, -1.0)

    return _vec(kern, E, alpha, p)
