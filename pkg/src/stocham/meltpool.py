"""Melt-pool geometry, surface roughness and porosity from solver results.

Geometric quantities are read off the peak-temperature field: a cell was
molten when its running peak exceeded the solidus, and the melt boundary is
placed where the linearly interpolated peak temperature crosses the
solidus, which keeps measurements smooth in the source parameters rather
than quantized to whole cells.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "NoMeltPoolError",
    "TrackMeasurement",
    "SurfaceHeightMap",
    "PorosityReport",
    "ZoneAreas",
    "measure_width_depth",
    "cross_section_area",
    "roughness_ra",
    "wall_side_height_map",
    "top_height_map",
    "wall_roughness",
    "lof_porosity",
    "ved",
    "DEFAULT_ZONES",
]

# wall zones as fractions of the track length: start, steady middle, end
DEFAULT_ZONES = {1: (0.0, 0.2), 2: (0.2, 0.8), 3: (0.8, 1.0)}
_ZONE_SLICES = {1: 3, 2: 20, 3: 3}


class NoMeltPoolError(ValueError):
    pass


@dataclass
class TrackMeasurement:
    stations: np.ndarray  # m, along the track
    width_um: np.ndarray
    depth_um: np.ndarray  # bead top to deepest molten point (D + H)
    depth_stations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    D_um: np.ndarray = field(default_factory=lambda: np.zeros(0))  # below the substrate datum
    H_um: np.ndarray = field(default_factory=lambda: np.zeros(0))  # consolidated height above it

    @property
    def width_mean(self) -> float:
        return float(np.mean(self.width_um))

    @property
    def width_std(self) -> float:
        return float(np.std(self.width_um, ddof=1)) if len(self.width_um) > 1 else 0.0

    @property
    def depth_mean(self) -> float:
        return float(np.mean(self.depth_um))

    @property
    def depth_std(self) -> float:
        return float(np.std(self.depth_um, ddof=1)) if len(self.depth_um) > 1 else 0.0

    def summary(self) -> dict[str, float]:
        return {"width_mean_um": self.width_mean, "width_std_um": self.width_std,
                "depth_mean_um": self.depth_mean, "depth_std_um": self.depth_std}

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "station_mm", "value_um"])
            for x, v in zip(self.stations, self.width_um):
                w.writerow(["width", repr(float(x * 1e3)), repr(float(v))])
            ds = self.depth_stations if len(self.depth_stations) else self.stations
            for name, arr in (("depth", self.depth_um), ("D", self.D_um), ("H", self.H_um)):
                for x, v in zip(ds, arr):
                    w.writerow([name, repr(float(x * 1e3)), repr(float(v))])


@dataclass
class SurfaceHeightMap:
    """Heights ``h[a, b]`` (m) over a regular (u, v) lattice with a validity mask."""

    u: np.ndarray
    v: np.ndarray
    heights: np.ndarray
    mask: np.ndarray

    def region(self, u_lo: float, u_hi: float) -> "SurfaceHeightMap":
        sel = (self.u >= u_lo) & (self.u < u_hi)
        return SurfaceHeightMap(self.u[sel], self.v, self.heights[sel], self.mask[sel])


@dataclass
class PorosityReport:
    box_volume: float
    pore_volume: float
    fraction: float
    pore_count: int
    pore_volumes: np.ndarray

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["box_volume_m3", "pore_volume_m3", "porosity_fraction", "pore_count"])
            w.writerow([repr(self.box_volume), repr(self.pore_volume), repr(self.fraction), self.pore_count])
            w.writerow([])
            w.writerow(["pore_id", "volume_m3"])
            for i, v in enumerate(self.pore_volumes):
                w.writerow([i + 1, repr(float(v))])


@dataclass
class ZoneAreas:
    zone: int
    stations: np.ndarray  # m
    area_um2: np.ndarray
    height_um: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.area_um2))

    @property
    def std(self) -> float:
        return float(np.std(self.area_um2, ddof=1)) if len(self.area_um2) > 1 else 0.0


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _crossing(values: np.ndarray, coords: np.ndarray, level: float, start: int, step: int) -> float | None:
    """Walk from ``start`` while ``values > level``; interpolate the exit point.

    Returns None when ``values[start]`` is not above the level. When the run
    reaches the array end the last coordinate is returned.
    """
    if values[start] <= level:
        return None
    i = start
    n = len(values)
    while 0 <= i + step < n and values[i + step] > level:
        i += step
    j = i + step
    if not 0 <= j < n:
        return float(coords[i])
    a, b = values[i], values[j]
    w = (a - level) / (a - b)
    return float(coords[i] + w * (coords[j] - coords[i]))


def _slab(field3: np.ndarray, xs: np.ndarray, x: float) -> np.ndarray:
    """Linear interpolation of a field along axis 0 at ``x``."""
    i = int(np.clip(np.searchsorted(xs, x) - 1, 0, len(xs) - 2))
    w = float(np.clip((x - xs[i]) / (xs[i + 1] - xs[i]), 0.0, 1.0))
    return (1.0 - w) * field3[i] + w * field3[i + 1]


def _track(result, segment: int = 0, layer: int | None = None):
    plan = result.plan
    seg = [s for s in plan.segments if s.laser_on][segment]
    if abs(seg.start[1] - seg.end[1]) > 1e-12 or abs(seg.start[2] - seg.end[2]) > 1e-12:
        raise ValueError("track measurements need a segment along x")
    layer = plan.n_layers - 1 if layer is None else layer
    z_top = result.layer_tops[layer]
    x0, x1 = sorted((seg.start[0], seg.end[0]))
    return x0, x1, seg.start[1], z_top


def _width_at(slab: np.ndarray, grid, yc: float, level: float, z_max: float) -> float:
    """Largest transverse envelope extent over the z levels of a slab (m)."""
    y = grid.y
    best = 0.0
    zs = grid.z
    for k in range(slab.shape[1]):
        if zs[k] > z_max:
            break
        col = slab[:, k]
        if grid.symmetric_y:
            hi = _crossing(col, y, level, 0, 1)
            if hi is None:
                continue
            w = 2.0 * (hi - grid.origin[1])
        else:
            jc = int(np.argmin(np.abs(y - yc)))
            hi = _crossing(col, y, level, jc, 1)
            if hi is None:
                continue
            lo = _crossing(col, y, level, jc, -1)
            w = hi - lo
        best = max(best, w)
    return best


def _deepest(slab: np.ndarray, grid, level: float, k_top: int) -> float | None:
    """Lowest z at which the slab is above the level, over all y columns."""
    z = grid.z
    low = None
    for j in range(slab.shape[0]):
        col = slab[j, :k_top + 1]
        # start from the highest molten cell of the column
        idx = np.flatnonzero(col > level)
        if idx.size == 0:
            continue
        zc = _crossing(col, z[:k_top + 1], level, int(idx.max()), -1)
        if zc is None:
            continue
        if idx.min() == 0:
            zc = float(grid.origin[2])
        low = zc if low is None else min(low, zc)
    return low


def density_ratio(props) -> float:
    return props.rho_powder / props.rho_solid


def _column_height(alpha_slab: np.ndarray, grid, ratio: float, datum: float | None = None) -> np.ndarray:
    """Consolidated height above a datum (the substrate by default) per y column (m)."""
    above = grid.z > (grid.substrate_top if datum is None else datum)
    return ratio * grid.dz * alpha_slab[:, above].sum(axis=1)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def measure_width_depth(result, n_width_stations: int = 50, n_depth_stations: int = 20,
                        segment: int = 0, layer: int | None = None, trim: float = 0.1) -> TrackMeasurement:
    """Width and depth of one track at stations over its steady middle part.

    Width is the largest transverse extent of the melt envelope at a
    station. Depth is D + H: D from the substrate datum (the previous layer
    top) down to the deepest molten point and H the densified bead height
    above the datum at the track centerline.
    """
    if n_width_stations < 1 or n_depth_stations < 1:
        raise ValueError("station counts must be >= 1")
    props = result.props
    level = props.T_solidus
    grid = result.grid
    Tpk = result.state.T_peak
    if not np.any(Tpk > level):
        raise NoMeltPoolError("no melt pool formed")
    x0, x1, yc, z_top = _track(result, segment, layer)
    L = x1 - x0
    k_top = int(np.searchsorted(grid.z, z_top)) - 1
    xs = grid.x
    ws = x0 + L * np.linspace(trim, 1.0 - trim, n_width_stations)
    ds = x0 + L * np.linspace(trim, 1.0 - trim, n_depth_stations)
    width = np.array([_width_at(_slab(Tpk, xs, x), grid, yc, level, z_top) for x in ws]) * 1e6
    depth = np.zeros(n_depth_stations)
    D = np.zeros(n_depth_stations)
    H = np.zeros(n_depth_stations)
    ratio = density_ratio(props)
    datum = z_top - result.plan.layer_thickness
    for m, x in enumerate(ds):
        s = _slab(Tpk, xs, x)
        low = _deepest(s, grid, level, k_top)
        if low is None:
            continue
        alpha = _slab(result.state.alpha, xs, x)
        jc = 0 if grid.symmetric_y else int(np.argmin(np.abs(grid.y - yc)))
        h = _column_height(alpha, grid, ratio, datum)[jc]
        H[m] = h * 1e6
        if low <= datum:
            D[m] = (datum - low) * 1e6
            depth[m] = D[m] + H[m]
        else:
            # melt confined to the deposit: map the undeformed depth onto the bead
            depth[m] = ratio * (z_top - low) * 1e6
    return TrackMeasurement(stations=ws, width_um=width, depth_um=depth, depth_stations=ds, D_um=D, H_um=H)


def section_area(alpha_slab: np.ndarray, grid, ratio: float) -> float:
    """Consolidated cross-section area above the substrate datum (m^2)."""
    above = grid.z > grid.substrate_top
    a = ratio * grid.dy * grid.dz * float(alpha_slab[:, above].sum())
    return 2.0 * a if grid.symmetric_y else a


def cross_section_area(result, zone: int, zones: dict[int, tuple[float, float]] | None = None,
                       n_slices: int | None = None, ratio: float | None = None) -> ZoneAreas:
    """Consolidated area of wall cross sections sampled inside one zone.

    ``ratio`` scales consolidated cell area for densification (powder to
    bulk density ratio by default; pass 1 for fields that already describe
    the final geometry).
    """
    zones = zones or DEFAULT_ZONES
    if zone not in zones:
        raise ValueError(f"zone must be one of {sorted(zones)}")
    plan = result.plan
    if plan.n_layers < 2 and ratio is None:
        raise ValueError("zone areas need a multi-layer result")
    grid = result.grid
    x0, x1, _, _ = _track(result, 0, 0)
    lo, hi = zones[zone]
    a, b = x0 + lo * (x1 - x0), x0 + hi * (x1 - x0)
    if a < grid.x[0] - 1e-12 or b > grid.x[-1] + 1e-12:
        raise ValueError("zone lies outside the grid")
    n = n_slices or _ZONE_SLICES.get(zone, 10)
    st = a + (b - a) * (np.arange(n) + 0.5) / n
    ratio = density_ratio(result.props) if ratio is None else ratio
    al = result.state.alpha
    areas = np.array([section_area(_slab(al, grid.x, x), grid, ratio) for x in st]) * 1e12
    heights = np.array([_column_height(_slab(al, grid.x, x), grid, ratio).max() for x in st]) * 1e6
    return ZoneAreas(zone, st, areas, heights)


def roughness_ra(height_map: SurfaceHeightMap) -> float:
    """Mean absolute deviation (um) of the valid heights from their best-fit plane."""
    uu, vv = np.meshgrid(height_map.u, height_map.v, indexing="ij")
    m = np.asarray(height_map.mask, dtype=bool)
    h = np.asarray(height_map.heights, dtype=float)[m]
    A = np.column_stack([np.ones(h.size), uu[m], vv[m]])
    if h.size < 3 or np.linalg.matrix_rank(A) < 3:
        raise ValueError("roughness needs at least three non-collinear samples")
    coef, *_ = np.linalg.lstsq(A, h, rcond=None)
    return float(np.mean(np.abs(h - A @ coef)) * 1e6)


def wall_side_height_map(result, z_range: tuple[float, float] | None = None) -> SurfaceHeightMap:
    """Side face of a thin wall as lateral position over the (x, z) plane.

    Heights are the +y edge of the melt envelope at every x column and z
    level; with the default ``z_range`` the levels run from the substrate
    datum to one layer below the last layer top so the rounded crest is
    excluded.
    """
    grid = result.grid
    level = result.props.T_solidus
    Tpk = result.state.T_peak
    x0, x1, yc, _ = _track(result, 0, 0)
    if z_range is None:
        t = result.plan.layer_thickness
        z_range = (grid.substrate_top, result.layer_tops[-1] - t)
    zs = grid.z
    ks = np.flatnonzero((zs > z_range[0]) & (zs < z_range[1]))
    is_ = np.flatnonzero((grid.x >= x0) & (grid.x <= x1))
    H = np.zeros((is_.size, ks.size))
    M = np.zeros_like(H, dtype=bool)
    y = grid.y
    jc = 0 if grid.symmetric_y else int(np.argmin(np.abs(y - yc)))
    for a, i in enumerate(is_):
        for b, k in enumerate(ks):
            e = _crossing(Tpk[i, :, k], y, level, jc, 1)
            if e is not None:
                H[a, b] = e
                M[a, b] = True
    return SurfaceHeightMap(grid.x[is_], zs[ks], H, M)


def top_height_map(result, ratio: float | None = None) -> SurfaceHeightMap:
    """Consolidated top surface height per (x, y) column, densification applied."""
    grid = result.grid
    ratio = density_ratio(result.props) if ratio is None else ratio
    above = grid.z > grid.substrate_top
    h = grid.substrate_top + ratio * grid.dz * result.state.alpha[:, :, above].sum(axis=2)
    return SurfaceHeightMap(grid.x, grid.y, h, np.ones(h.shape, dtype=bool))


def wall_roughness(result, n_regions: int = 10) -> tuple[np.ndarray, float, float]:
    """Ra (um) of the wall side face in ``n_regions`` equal parts; (per region, mean, std)."""
    hm = wall_side_height_map(result)
    x0, x1, _, _ = _track(result, 0, 0)
    edges = np.linspace(x0, x1 + 1e-12, n_regions + 1)
    ra = np.array([roughness_ra(hm.region(edges[r], edges[r + 1])) for r in range(n_regions)])
    return ra, float(ra.mean()), float(ra.std(ddof=1)) if n_regions > 1 else 0.0


def _box_slices(grid, box) -> tuple[slice, slice, slice]:
    out = []
    for ax, (lo, hi) in enumerate(box):
        c = (grid.x, grid.y, grid.z)[ax]
        idx = np.flatnonzero((c >= lo) & (c <= hi))
        if idx.size == 0:
            raise ValueError("empty analysis box")
        out.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(out)


def lof_porosity(result, analysis_box: Sequence[tuple[float, float]], full_level: float = 1.0 - 1e-9) -> PorosityReport:
    """Enclosed unfused volume inside a box.

    Cells with alpha below ``full_level`` form 6-connected components; a
    component is a pore unless it reaches a cell at or above the top of the
    fully consolidated material in its own column, i.e. is open to the
    surface.
    """
    grid = result.grid
    sl = _box_slices(grid, analysis_box)
    alpha = result.state.alpha[sl]
    solid = alpha >= full_level
    nz = alpha.shape[2]
    kk = np.arange(nz)[None, None, :]
    top = np.where(solid.any(axis=2), nz - 1 - np.argmax(solid[:, :, ::-1], axis=2), -1)
    exterior = (~solid) & (kk >= top[:, :, None])
    labels, n = ndimage.label(~solid)
    vol = grid.cell_volume
    open_ids = np.unique(labels[exterior])
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    is_pore = np.ones(n + 1, dtype=bool)
    is_pore[0] = False
    is_pore[open_ids] = False
    pore_volumes = counts[is_pore].astype(float) * vol
    box_volume = float(alpha.size * vol)
    pv = float(pore_volumes.sum())
    return PorosityReport(box_volume, pv, pv / box_volume, int(is_pore.sum()), pore_volumes)


def ved(P: float, V: float, beam_diameter: float = 0.1, layer_thickness: float = 0.04) -> float:
    """Volumetric energy density P / (V sigma t); V in mm/s, lengths in mm, result J/mm^3."""
    for name, v in (("P", P), ("V", V), ("beam_diameter", beam_diameter), ("layer_thickness", layer_thickness)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    return P / (V * beam_diameter * layer_thickness)
