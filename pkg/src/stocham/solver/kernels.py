"""Numba kernels for the explicit enthalpy update."""
from __future__ import annotations

import numpy as np
from numba import njit

from ..material import (
    _CP0,
    _CP1,
    _CS0,
    _CS1,
    _RP,
    _RS,
    _TMIN,
    _TREF,
    _TS,
    _int_signed,
    k_conductivity,
    k_consolidation,
    k_liquid_fraction,
    k_temperature_from_E,
    k_volumetric_enthalpy,
)


@njit(cache=True, error_model="numpy")
def conductivity_field(T, alpha, active, p, out):
    nx, ny, nz = T.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if active[i, j, k]:
                    out[i, j, k] = k_conductivity(T[i, j, k], alpha[i, j, k], p)
                else:
                    out[i, j, k] = 0.0


@njit(cache=True, error_model="numpy")
def _hmean(a, b):
    s = a + b
    if s <= 0.0:
        return 0.0
    return 2.0 * a * b / s


@njit(cache=True, error_model="numpy")
def conduction_rhs(T, kc, active, src, dx, dy, dz, h_c, emis_sig, T_amb, T_bot, out):
    """Net heat rate (W) into every active cell.

    Faces between active cells use the harmonic mean conductivity. The top
    face of the topmost active cell of each column loses convection plus
    radiation, the bottom face of the domain is held at ``T_bot`` and the
    lateral faces are adiabatic. Returns (top loss W, bottom loss W).
    """
    nx, ny, nz = T.shape
    gx = dy * dz / dx
    gy = dx * dz / dy
    gz = dx * dy / dz
    Az = dx * dy
    top_loss = 0.0
    bot_loss = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not active[i, j, k]:
                    out[i, j, k] = 0.0
                    continue
                Tc = T[i, j, k]
                kk = kc[i, j, k]
                net = src[i, j, k]
                if i > 0 and active[i - 1, j, k]:
                    net += _hmean(kk, kc[i - 1, j, k]) * gx * (T[i - 1, j, k] - Tc)
                if i < nx - 1 and active[i + 1, j, k]:
                    net += _hmean(kk, kc[i + 1, j, k]) * gx * (T[i + 1, j, k] - Tc)
                if j > 0 and active[i, j - 1, k]:
                    net += _hmean(kk, kc[i, j - 1, k]) * gy * (T[i, j - 1, k] - Tc)
                if j < ny - 1 and active[i, j + 1, k]:
                    net += _hmean(kk, kc[i, j + 1, k]) * gy * (T[i, j + 1, k] - Tc)
                if k > 0:
                    if active[i, j, k - 1]:
                        net += _hmean(kk, kc[i, j, k - 1]) * gz * (T[i, j, k - 1] - Tc)
                else:
                    q = 2.0 * kk * gz * (T_bot - Tc)
                    net += q
                    bot_loss -= q
                if k == nz - 1 or not active[i, j, k + 1]:
                    T4 = Tc * Tc * Tc * Tc
                    Ta4 = T_amb * T_amb * T_amb * T_amb
                    q = Az * (h_c * (Tc - T_amb) + emis_sig * (T4 - Ta4))
                    net -= q
                    top_loss += q
                else:
                    net += _hmean(kk, kc[i, j, k + 1]) * gz * (T[i, j, k + 1] - Tc)
                out[i, j, k] = net
    return top_loss, bot_loss


@njit(cache=True, error_model="numpy")
def advection_rhs(E, ux, uy, uz, dx, dy, dz, i0, i1, j0, j1, k0, k1, out):
    """Upwind advection of E (W) for the cells of an index window.

    ``out`` is window shaped. Only faces interior to the window are visited;
    the window carries a ring of non-liquid cells, so its boundary faces
    have zero velocity and the total energy is conserved exactly.
    """
    Ax = dy * dz
    Ay = dx * dz
    Az = dx * dy
    for i in range(i0 + 1, i1):
        for j in range(j0, j1):
            for k in range(k0, k1):
                u = ux[i, j, k]
                if u == 0.0:
                    continue
                e = E[i - 1, j, k] if u > 0.0 else E[i, j, k]
                f = u * e * Ax
                out[i - 1 - i0, j - j0, k - k0] -= f
                out[i - i0, j - j0, k - k0] += f
    for i in range(i0, i1):
        for j in range(j0 + 1, j1):
            for k in range(k0, k1):
                v = uy[i, j, k]
                if v == 0.0:
                    continue
                e = E[i, j - 1, k] if v > 0.0 else E[i, j, k]
                f = v * e * Ay
                out[i - i0, j - 1 - j0, k - k0] -= f
                out[i - i0, j - j0, k - k0] += f
    for i in range(i0, i1):
        for j in range(j0, j1):
            for k in range(k0 + 1, k1):
                w = uz[i, j, k]
                if w == 0.0:
                    continue
                e = E[i, j, k - 1] if w > 0.0 else E[i, j, k]
                f = w * e * Az
                out[i - i0, j - j0, k - 1 - k0] -= f
                out[i - i0, j - j0, k - k0] += f


@njit(cache=True, error_model="numpy")
def fill_enthalpy(E, T, alpha, active, p):
    nx, ny, nz = T.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if active[i, j, k]:
                    E[i, j, k] = k_volumetric_enthalpy(T[i, j, k], alpha[i, j, k], p)


@njit(cache=True, error_model="numpy")
def update_state(E, T, f_l, alpha, T_peak, active, rate, dt, vol, p):
    """Advance E, recover T, then update T_peak, alpha and f_l.

    When alpha rises the cell keeps its temperature and E is re-evaluated
    for the denser state; that energy is returned separately so the global
    budget still closes. Returns (consolidation energy J, max T, liquid cell
    count).
    """
    nx, ny, nz = T.shape
    consol = 0.0
    Tmax = 0.0
    n_liq = 0
    s = dt / vol
    Ts = p[_TS]
    Tmin = p[_TMIN]
    # solid-branch constants, recomputed only when alpha changes between cells
    a_prev = -1.0
    inv_rho = c1 = c0 = g_min = shift = c_min = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not active[i, j, k]:
                    continue
                r = rate[i, j, k]
                if r == 0.0:
                    # nothing changes; still report the state
                    t = T[i, j, k]
                    if f_l[i, j, k] > 0.0:
                        n_liq += 1
                    if t > Tmax:
                        Tmax = t
                    continue
                e = E[i, j, k] + s * r
                a = alpha[i, j, k]
                if a != a_prev:
                    a_prev = a
                    inv_rho = 1.0 / (a * p[_RS] + (1.0 - a) * p[_RP])
                    c1 = a * p[_CS1] + (1.0 - a) * p[_CP1]
                    c0 = a * p[_CS0] + (1.0 - a) * p[_CP0]
                    g_min = _int_signed(c1, c0, Tmin, p[_TREF], Tmin)
                    shift = 0.5 * c1 * Tmin * Tmin + c0 * Tmin - g_min
                    c_min = c1 * Tmin + c0
                g = e * inv_rho
                if g <= g_min:
                    t = Tmin + (g - g_min) / c_min
                elif c1 == 0.0:
                    t = (g + shift) / c0
                else:
                    t = (-c0 + np.sqrt(c0 * c0 + 2.0 * c1 * (g + shift))) / c1
                if t > Ts:
                    t = k_temperature_from_E(e, a, p, T[i, j, k])
                tp = T_peak[i, j, k]
                if t > tp:
                    tp = t
                    T_peak[i, j, k] = t
                    an = k_consolidation(tp, p)
                    if an > a:
                        en = k_volumetric_enthalpy(t, an, p)
                        consol += (en - e) * vol
                        e = en
                        alpha[i, j, k] = an
                E[i, j, k] = e
                T[i, j, k] = t
                fl = k_liquid_fraction(t, p)
                f_l[i, j, k] = fl
                if fl > 0.0:
                    n_liq += 1
                if t > Tmax:
                    Tmax = t
    return consol, Tmax, n_liq
