"""Melt-pool flow on the staggered grid.

Momentum lives on faces between two liquid cells (f_l > 0) and every other
face is held at zero, so solid and powder stay at rest. The predictor is
explicit (upwind advection, viscous diffusion, Boussinesq buoyancy, the
Marangoni shear on the top surface as a stress boundary) with the Darcy
mushy-zone drag applied implicitly; a pressure projection over each
connected liquid region then removes the divergence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy import ndimage
import pyamg
from scipy.sparse.linalg import factorized

from ..material import MaterialProperties


# liquid cell count above which the pressure solve switches from direct to AMG-CG
_DIRECT_MAX = 6000


class ProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class FluidParams:
    rho: float
    mu: float
    beta: float
    g: float
    dgdT: float
    T_ref: float
    darcy_C: float
    darcy_B: float

    @classmethod
    def from_props(cls, props: MaterialProperties) -> "FluidParams":
        c = props.dendrite_spacing
        return cls(rho=props.rho_liquid, mu=props.viscosity, beta=props.thermal_expansivity,
                   g=props.gravity, dgdT=props.marangoni_coeff, T_ref=props.T_reference,
                   darcy_C=180.0 * props.viscosity / (c * c), darcy_B=props.darcy_epsilon)


def darcy_coefficient(f_l, fp: FluidParams):
    """Momentum sink coefficient (kg m^-3 s^-1) of the mushy zone."""
    f = np.asarray(f_l, dtype=float)
    return fp.darcy_C * (1.0 - f) ** 2 / (f ** 3 + fp.darcy_B)


@njit(cache=True, error_model="numpy")
def _top_marks(active, top, i0, i1, j0, j1, k0, k1):
    nz = active.shape[2]
    for i in range(i0, i1):
        for j in range(j0, j1):
            for k in range(k0, k1):
                top[i, j, k] = active[i, j, k] and (k == nz - 1 or not active[i, j, k + 1])


@njit(cache=True, error_model="numpy")
def _predict(ux, uy, uz, T, f, fluid, top, dx, dy, dz, dt, rho, mu, beta, g, dgdT, T_ref,
             C, B, i0, i1, j0, j1, k0, k1, nux, nuy, nuz):
    nx, ny, nz = T.shape
    nu = mu / rho
    # x faces
    for i in range(max(i0, 1), min(i1, nx - 1) + 1):
        for j in range(j0, j1):
            for k in range(k0, k1):
                if not (fluid[i - 1, j, k] and fluid[i, j, k]):
                    nux[i, j, k] = 0.0
                    continue
                u = ux[i, j, k]
                xm = ux[i - 1, j, k] if (i - 2 >= 0 and fluid[i - 2, j, k]) else 0.0
                xp = ux[i + 1, j, k] if (i + 1 < nx and fluid[i + 1, j, k]) else 0.0
                ym = ux[i, j - 1, k] if (j > 0 and fluid[i - 1, j - 1, k] and fluid[i, j - 1, k]) else 0.0
                yp = ux[i, j + 1, k] if (j < ny - 1 and fluid[i - 1, j + 1, k] and fluid[i, j + 1, k]) else 0.0
                zm = ux[i, j, k - 1] if (k > 0 and fluid[i - 1, j, k - 1] and fluid[i, j, k - 1]) else 0.0
                lap = (xm - 2 * u + xp) / (dx * dx) + (ym - 2 * u + yp) / (dy * dy) + (zm - u) / (dz * dz)
                if top[i - 1, j, k] and top[i, j, k]:
                    tau = dgdT * (T[i, j, k] - T[i - 1, j, k]) / dx
                    lap += tau / (mu * dz)
                elif k < nz - 1 and fluid[i - 1, j, k + 1] and fluid[i, j, k + 1]:
                    lap += (ux[i, j, k + 1] - u) / (dz * dz)
                else:
                    lap += -u / (dz * dz)
                v = 0.25 * (uy[i - 1, j, k] + uy[i - 1, j + 1, k] + uy[i, j, k] + uy[i, j + 1, k])
                w = 0.25 * (uz[i - 1, j, k] + uz[i - 1, j, k + 1] + uz[i, j, k] + uz[i, j, k + 1])
                zp = ux[i, j, k + 1] if (k < nz - 1 and fluid[i - 1, j, k + 1] and fluid[i, j, k + 1]) else u
                adv = u * ((u - xm) / dx if u > 0 else (xp - u) / dx)
                adv += v * ((u - ym) / dy if v > 0 else (yp - u) / dy)
                adv += w * ((u - zm) / dz if w > 0 else (zp - u) / dz)
                us = u + dt * (nu * lap - adv)
                ff = 0.5 * (f[i - 1, j, k] + f[i, j, k])
                D = C * (1 - ff) * (1 - ff) / (ff * ff * ff + B) / rho
                nux[i, j, k] = us / (1.0 + dt * D)
    # y faces
    for i in range(i0, i1):
        for j in range(max(j0, 1), min(j1, ny - 1) + 1):
            for k in range(k0, k1):
                if not (fluid[i, j - 1, k] and fluid[i, j, k]):
                    nuy[i, j, k] = 0.0
                    continue
                u = uy[i, j, k]
                ym = uy[i, j - 1, k] if (j - 2 >= 0 and fluid[i, j - 2, k]) else 0.0
                yp = uy[i, j + 1, k] if (j + 1 < ny and fluid[i, j + 1, k]) else 0.0
                xm = uy[i - 1, j, k] if (i > 0 and fluid[i - 1, j - 1, k] and fluid[i - 1, j, k]) else 0.0
                xp = uy[i + 1, j, k] if (i < nx - 1 and fluid[i + 1, j - 1, k] and fluid[i + 1, j, k]) else 0.0
                zm = uy[i, j, k - 1] if (k > 0 and fluid[i, j - 1, k - 1] and fluid[i, j, k - 1]) else 0.0
                lap = (xm - 2 * u + xp) / (dx * dx) + (ym - 2 * u + yp) / (dy * dy) + (zm - u) / (dz * dz)
                if top[i, j - 1, k] and top[i, j, k]:
                    tau = dgdT * (T[i, j, k] - T[i, j - 1, k]) / dy
                    lap += tau / (mu * dz)
                elif k < nz - 1 and fluid[i, j - 1, k + 1] and fluid[i, j, k + 1]:
                    lap += (uy[i, j, k + 1] - u) / (dz * dz)
                else:
                    lap += -u / (dz * dz)
                v = 0.25 * (ux[i, j - 1, k] + ux[i + 1, j - 1, k] + ux[i, j, k] + ux[i + 1, j, k])
                w = 0.25 * (uz[i, j - 1, k] + uz[i, j - 1, k + 1] + uz[i, j, k] + uz[i, j, k + 1])
                zp = uy[i, j, k + 1] if (k < nz - 1 and fluid[i, j - 1, k + 1] and fluid[i, j, k + 1]) else u
                adv = u * ((u - ym) / dy if u > 0 else (yp - u) / dy)
                adv += v * ((u - xm) / dx if v > 0 else (xp - u) / dx)
                adv += w * ((u - zm) / dz if w > 0 else (zp - u) / dz)
                us = u + dt * (nu * lap - adv)
                ff = 0.5 * (f[i, j - 1, k] + f[i, j, k])
                D = C * (1 - ff) * (1 - ff) / (ff * ff * ff + B) / rho
                nuy[i, j, k] = us / (1.0 + dt * D)
    # z faces (the top face of a column is a wall, w = 0)
    for i in range(i0, i1):
        for j in range(j0, j1):
            for k in range(max(k0, 1), min(k1, nz - 1) + 1):
                if not (fluid[i, j, k - 1] and fluid[i, j, k]):
                    nuz[i, j, k] = 0.0
                    continue
                u = uz[i, j, k]
                zm = uz[i, j, k - 1] if (k - 2 >= 0 and fluid[i, j, k - 2]) else 0.0
                zp = uz[i, j, k + 1] if (k + 1 < nz and fluid[i, j, k + 1] and not top[i, j, k]) else 0.0
                xm = uz[i - 1, j, k] if (i > 0 and fluid[i - 1, j, k - 1] and fluid[i - 1, j, k]) else 0.0
                xp = uz[i + 1, j, k] if (i < nx - 1 and fluid[i + 1, j, k - 1] and fluid[i + 1, j, k]) else 0.0
                ym = uz[i, j - 1, k] if (j > 0 and fluid[i, j - 1, k - 1] and fluid[i, j - 1, k]) else 0.0
                yp = uz[i, j + 1, k] if (j < ny - 1 and fluid[i, j + 1, k - 1] and fluid[i, j + 1, k]) else 0.0
                lap = (xm - 2 * u + xp) / (dx * dx) + (ym - 2 * u + yp) / (dy * dy) + (zm - 2 * u + zp) / (dz * dz)
                v = 0.25 * (ux[i, j, k - 1] + ux[i + 1, j, k - 1] + ux[i, j, k] + ux[i + 1, j, k])
                w = 0.25 * (uy[i, j, k - 1] + uy[i, j + 1, k - 1] + uy[i, j, k] + uy[i, j + 1, k])
                adv = u * ((u - zm) / dz if u > 0 else (zp - u) / dz)
                adv += v * ((u - xm) / dx if v > 0 else (xp - u) / dx)
                adv += w * ((u - ym) / dy if w > 0 else (yp - u) / dy)
                buoy = g * beta * (0.5 * (T[i, j, k - 1] + T[i, j, k]) - T_ref)
                us = u + dt * (nu * lap - adv + buoy)
                ff = 0.5 * (f[i, j, k - 1] + f[i, j, k])
                D = C * (1 - ff) * (1 - ff) / (ff * ff * ff + B) / rho
                nuz[i, j, k] = us / (1.0 + dt * D)


def _bbox(mask: np.ndarray):
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        return None
    return tuple((int(a.min()), int(a.max()) + 1) for a in idx)


def _union(a, b, shape):
    if a is None:
        return b
    if b is None:
        return a
    return tuple((max(0, min(x[0], y[0])), min(n, max(x[1], y[1]))) for x, y, n in zip(a, b, shape))


def _grow(box, shape, n=1):
    return tuple((max(0, lo - n), min(s, hi + n)) for (lo, hi), s in zip(box, shape))


def divergence(ux, uy, uz, dx, dy, dz):
    return ((ux[1:] - ux[:-1]) / dx + (uy[:, 1:] - uy[:, :-1]) / dy + (uz[:, :, 1:] - uz[:, :, :-1]) / dz)


def project(ux, uy, uz, fluid, box, dx, dy, dz, dt, rho, guess=None, cache=None):
    """Make the face velocities divergence free in every liquid cell.

    Returns the pressure (Pa) on the liquid cells of ``box``; ``guess``
    (same shape) warm-starts the iterative solve.
    """
    (i0, i1), (j0, j1), (k0, k1) = box
    sub = fluid[i0:i1, j0:j1, k0:k1]
    n = int(sub.sum())
    if n == 0:
        return None
    index = -np.ones(sub.shape, dtype=np.int64)
    index[sub] = np.arange(n)
    div = divergence(ux[i0:i1 + 1, j0:j1, k0:k1], uy[i0:i1, j0:j1 + 1, k0:k1],
                     uz[i0:i1, j0:j1, k0:k1 + 1], dx, dy, dz)[sub]
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for axis, h in ((0, dx), (1, dy), (2, dz)):
        a = np.moveaxis(index, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        pair = (lo >= 0) & (hi >= 0)
        lo, hi = lo[pair], hi[pair]
        w = 1.0 / (h * h)
        rows += [lo, hi]
        cols += [hi, lo]
        vals += [np.full(lo.size, w), np.full(lo.size, w)]
        np.subtract.at(diag, lo, w)
        np.subtract.at(diag, hi, w)
    rows = np.concatenate(rows + [np.arange(n)])
    cols = np.concatenate(cols + [np.arange(n)])
    vals = np.concatenate(vals + [diag])
    rhs = rho / dt * div
    # one pinned cell (p = 0) per connected region makes the Neumann problem
    # regular; dropping its row and column keeps the operator symmetric
    labels, n_lab = ndimage.label(sub)
    first = ndimage.minimum(np.arange(n), labels[sub], np.arange(1, n_lab + 1))
    pins = np.asarray(first, dtype=np.int64).reshape(-1)
    pinned = np.zeros(n, dtype=bool)
    pinned[pins] = True
    keep = ~(pinned[rows] | pinned[cols])
    rows = np.concatenate([rows[keep], pins])
    cols = np.concatenate([cols[keep], pins])
    vals = np.concatenate([-vals[keep], np.ones(pins.size)])
    b = -rhs
    b[pins] = 0.0
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    x0 = None
    if guess is not None:
        x0 = guess[sub].astype(float)
        x0[pins] = 0.0
    # the factorization or hierarchy is reused while the liquid region keeps its shape
    if cache is not None and cache.get("box") == box and np.array_equal(cache.get("sub"), sub):
        solver = cache["solver"]
    else:
        if n < _DIRECT_MAX:
            solver = factorized(A.tocsc())
        else:
            solver = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=256)
        if cache is not None:
            cache.update(box=box, sub=sub.copy(), solver=solver)
    if n < _DIRECT_MAX:
        phi = solver(b)
    else:
        ml = solver
        phi = ml.solve(b, x0=x0, tol=1e-10, accel="cg", maxiter=200)
    if not np.all(np.isfinite(phi)):
        raise ProjectionError("pressure solve produced non-finite values")
    P = np.zeros(sub.shape)
    P[sub] = phi
    s = dt / rho
    # correct faces between two liquid cells
    fx = sub[:-1] & sub[1:]
    ux[i0 + 1:i1, j0:j1, k0:k1][fx] -= s * ((P[1:] - P[:-1]) / dx)[fx]
    fy = sub[:, :-1] & sub[:, 1:]
    uy[i0:i1, j0 + 1:j1, k0:k1][fy] -= s * ((P[:, 1:] - P[:, :-1]) / dy)[fy]
    fz = sub[:, :, :-1] & sub[:, :, 1:]
    uz[i0:i1, j0:j1, k0 + 1:k1][fz] -= s * ((P[:, :, 1:] - P[:, :, :-1]) / dz)[fz]
    res = divergence(ux[i0:i1 + 1, j0:j1, k0:k1], uy[i0:i1, j0:j1 + 1, k0:k1],
                     uz[i0:i1, j0:j1, k0:k1 + 1], dx, dy, dz)[sub]
    umax = max(np.abs(ux[i0:i1 + 1, j0:j1, k0:k1]).max(), np.abs(uy[i0:i1, j0:j1 + 1, k0:k1]).max(),
               np.abs(uz[i0:i1, j0:j1, k0:k1 + 1]).max())
    scale = max(umax / min(dx, dy, dz), 1e-300)
    if np.abs(res).max() > 1e-8 * scale and np.abs(res).max() > 1e-12:
        raise ProjectionError(f"projection residual {np.abs(res).max():.3e} exceeds {1e-8 * scale:.3e}")
    return P


class FluidStepper:
    """Advances the flow inside the window around the liquid.

    Velocities are nonzero only inside the previous window, so each step
    works on the union of the previous and current windows.
    """

    def __init__(self, fp: FluidParams, grid):
        self.fp = fp
        self.grid = grid
        self.box = None
        self._top = np.zeros(grid.shape, dtype=np.bool_)
        self._buf = None
        self.last_umax = 0.0
        self._amg: dict = {}

    def step(self, state, dt: float) -> float:
        """Advance the face velocities of ``state`` by ``dt``; returns max |u|."""
        g = self.grid
        fluid = state.active & (state.f_l > 0.0)
        new_box = _bbox(fluid)
        if new_box is not None:
            new_box = _grow(new_box, g.shape)
        box = _union(self.box, new_box, g.shape)
        if box is None:
            self.last_umax = 0.0
            return 0.0
        (i0, i1), (j0, j1), (k0, k1) = box
        if self._buf is None:
            self._buf = (np.zeros_like(state.ux), np.zeros_like(state.uy), np.zeros_like(state.uz))
        nux, nuy, nuz = self._buf
        _top_marks(state.active, self._top, i0, i1, j0, j1, k0, k1)
        fp = self.fp
        _predict(state.ux, state.uy, state.uz, state.T, state.f_l, fluid, self._top, g.dx, g.dy, g.dz, dt,
                 fp.rho, fp.mu, fp.beta, fp.g, fp.dgdT, fp.T_ref, fp.darcy_C, fp.darcy_B,
                 i0, i1, j0, j1, k0, k1, nux, nuy, nuz)
        # faces on the window boundary were written by the kernel or are walls
        state.ux[i0:i1 + 1, j0:j1, k0:k1] = nux[i0:i1 + 1, j0:j1, k0:k1]
        state.uy[i0:i1, j0:j1 + 1, k0:k1] = nuy[i0:i1, j0:j1 + 1, k0:k1]
        state.uz[i0:i1, j0:j1, k0:k1 + 1] = nuz[i0:i1, j0:j1, k0:k1 + 1]
        state.ux[0] = 0.0
        state.ux[-1] = 0.0
        state.uy[:, 0] = 0.0
        state.uy[:, -1] = 0.0
        state.uz[:, :, 0] = 0.0
        state.uz[:, :, -1] = 0.0
        guess = None
        if new_box is not None:
            (a0, a1), (b0, b1), (c0, c1) = new_box
            guess = state.p[a0:a1, b0:b1, c0:c1].copy()
        state.p[i0:i1, j0:j1, k0:k1] = 0.0
        if new_box is not None:
            P = project(state.ux, state.uy, state.uz, fluid, new_box, g.dx, g.dy, g.dz, dt, fp.rho, guess, self._amg)
            if P is not None:
                state.p[a0:a1, b0:b1, c0:c1] = P
        self.box = new_box
        self.last_umax = float(max(np.abs(state.ux[i0:i1 + 1, j0:j1, k0:k1]).max(),
                                   np.abs(state.uy[i0:i1, j0:j1 + 1, k0:k1]).max(),
                                   np.abs(state.uz[i0:i1, j0:j1, k0:k1 + 1]).max()))
        return self.last_umax
