"""Uniform Cartesian grid and the per-cell field state."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..material import IN625, MaterialProperties, k_volumetric_enthalpy
from ..scanpath import ScanPlan

__all__ = ["Grid", "FieldState", "grid_for_plan"]


@dataclass(frozen=True)
class Grid:
    """Cell-centered grid; index order is (x, y, z), z pointing up.

    ``substrate_top`` is the z of the substrate surface, ``powder_top`` the
    top of the topmost powder layer the grid can hold. With ``symmetric_y``
    the plane ``y = origin[1]`` is a symmetry plane and the domain holds
    only ``y >= origin[1]``.
    """

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    substrate_top: float = 0.0
    powder_top: float = 0.0
    symmetric_y: bool = False

    def __post_init__(self) -> None:
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not min(self.dx, self.dy, self.dz) > 0:
            raise ValueError("grid spacing must be positive")
        if self.powder_top < self.substrate_top - 1e-15:
            raise ValueError("powder_top must be >= substrate_top")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def z(self) -> np.ndarray:
        return self.origin[2] + (np.arange(self.nz) + 0.5) * self.dz

    @property
    def z_faces(self) -> np.ndarray:
        return self.origin[2] + np.arange(self.nz + 1) * self.dz

    @property
    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array(self.origin)
        return lo, lo + np.array([self.nx * self.dx, self.ny * self.dy, self.nz * self.dz])

    def layer_index(self, z: float) -> int:
        """Number of cells below height ``z`` (z must lie on a face)."""
        n = (z - self.origin[2]) / self.dz
        k = int(round(n))
        if abs(n - k) > 1e-6:
            raise ValueError(f"height {z} does not fall on a cell face")
        return k

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "nz": self.nz, "dx": self.dx, "dy": self.dy,
                "dz": self.dz, "origin": list(self.origin), "substrate_top": self.substrate_top,
                "powder_top": self.powder_top, "symmetric_y": self.symmetric_y}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        d = dict(d)
        d["origin"] = tuple(d["origin"])
        return cls(**d)


def _is_single_line(plan: ScanPlan) -> bool:
    ys = {s.start[1] for s in plan.segments} | {s.end[1] for s in plan.segments}
    return len(ys) == 1


def grid_for_plan(plan: ScanPlan, cell: float = 10e-6, pad_lateral: float = 3e-4,
                  pad_end: float | None = None, substrate_depth: float = 4e-4,
                  symmetric: bool | None = None) -> Grid:
    """Grid holding every layer of ``plan`` with the given padding.

    Single-line plans (every segment at one y) default to the y-symmetric
    half domain. The substrate top sits at z = 0 and layer ``k`` spans
    ``[k t, (k + 1) t]``.
    """
    if not plan.segments:
        raise ValueError("empty plan")
    lo, hi = plan.bounds
    pad_end = pad_lateral if pad_end is None else pad_end
    t = plan.layer_thickness
    n_layer = t / cell
    if abs(n_layer - round(n_layer)) > 1e-6 or round(n_layer) < 1:
        raise ValueError(f"layer thickness {t} is not a whole number of {cell} cells")
    n_layer = int(round(n_layer))
    if symmetric is None:
        symmetric = _is_single_line(plan)
    if symmetric and not _is_single_line(plan):
        raise ValueError("symmetric half domain needs every segment on one y line")
    x0 = lo[0] - pad_end
    nx = int(np.ceil((hi[0] + pad_end - x0) / cell - 1e-9))
    if symmetric:
        y0 = lo[1]
        ny = int(np.ceil(pad_lateral / cell - 1e-9))
    else:
        y0 = lo[1] - pad_lateral
        ny = int(np.ceil((hi[1] + pad_lateral - y0) / cell - 1e-9))
    n_sub = int(np.ceil(substrate_depth / cell - 1e-9))
    nz = n_sub + n_layer * plan.n_layers
    z0 = -n_sub * cell
    return Grid(nx, ny, nz, cell, cell, cell, (x0, y0, z0), substrate_top=0.0,
                powder_top=plan.n_layers * n_layer * cell, symmetric_y=symmetric)


@dataclass
class FieldState:
    """Cell fields plus staggered velocities.

    ``ux`` lives on x faces, shape (nx + 1, ny, nz), and likewise ``uy``,
    ``uz``. ``E`` is the volumetric enthalpy the energy update advances.
    Cells outside ``active`` (not yet deposited layers) carry ambient values
    and take no part in the update.
    """

    T: np.ndarray
    E: np.ndarray
    f_l: np.ndarray
    T_peak: np.ndarray
    alpha: np.ndarray
    active: np.ndarray
    p: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    uz: np.ndarray
    time: float = 0.0
    step: int = 0

    @classmethod
    def initial(cls, grid: Grid, props: MaterialProperties = IN625, top: float | None = None,
                T0: float | None = None) -> "FieldState":
        """Substrate (alpha = 1) up to ``substrate_top``, powder up to ``top``."""
        T0 = props.T_preheat if T0 is None else T0
        top = grid.substrate_top if top is None else top
        shape = grid.shape
        zc = grid.z
        active = np.zeros(shape, dtype=np.bool_)
        active[:, :, zc < top] = True
        alpha = np.zeros(shape)
        alpha[:, :, zc < grid.substrate_top] = 1.0
        T = np.full(shape, T0)
        T[~active] = props.T_ambient
        pa = props.as_array()
        E = np.zeros(shape)
        Ecol = np.array([k_volumetric_enthalpy(T0, a, pa) for a in (0.0, 1.0)])
        E[active] = np.where(alpha[active] > 0.5, Ecol[1], Ecol[0])
        return cls(T=T, E=E, f_l=np.zeros(shape), T_peak=T.copy(), alpha=alpha, active=active,
                   p=np.zeros(shape), ux=np.zeros((grid.nx + 1, grid.ny, grid.nz)),
                   uy=np.zeros((grid.nx, grid.ny + 1, grid.nz)),
                   uz=np.zeros((grid.nx, grid.ny, grid.nz + 1)))

    def copy(self) -> "FieldState":
        return FieldState(**{k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in self.__dict__.items()})

    @property
    def velocity(self) -> np.ndarray:
        """Cell-centered velocity, shape (nx, ny, nz, 3)."""
        return np.stack([0.5 * (self.ux[1:] + self.ux[:-1]),
                         0.5 * (self.uy[:, 1:] + self.uy[:, :-1]),
                         0.5 * (self.uz[:, :, 1:] + self.uz[:, :, :-1])], axis=-1)

    def total_energy(self, grid: Grid) -> float:
        return float(np.sum(self.E[self.active]) * grid.cell_volume)
