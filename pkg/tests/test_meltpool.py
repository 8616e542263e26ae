import csv

import numpy as np
import pytest
from scipy import integrate

from stocham.material import IN625
from stocham.meltpool import (NoMeltPoolError, SurfaceHeightMap, cross_section_area, density_ratio, lof_porosity,
                              measure_width_depth, roughness_ra, ved, wall_roughness)
from stocham.scanpath import ScanPlan, ScanSegment, multi_track_plan, single_track_plan
from stocham.solver import Grid

from conftest import synthetic_result

TS = IN625.T_solidus


def _half_cylinder(r=50e-6, cell=2e-6):
    ny, nz = int(round(240e-6 / cell)), int(round(100e-6 / cell))
    g = Grid(40, ny, nz, 25e-6, cell, cell, origin=(-0.0e-3, -120e-6, -100e-6), substrate_top=0.0, powder_top=0.0)
    y = g.y[None, :, None]
    z = g.z[None, None, :]
    rho = np.sqrt(y ** 2 + z ** 2)
    T = np.broadcast_to(TS + 1000.0 * (r - rho) / r, g.shape).copy()
    plan = ScanPlan((ScanSegment((0.0, 0.0, 0.0), (1e-3, 0.0, 0.0), speed=1.23, power=300.0),), layer_thickness=0.0)
    return synthetic_result(g, T_peak=T, plan=plan, layer_tops=[0.0])


def test_half_cylinder_width_depth(tmp_path):
    m = measure_width_depth(_half_cylinder())
    assert m.width_um.size == 50 and m.depth_um.size == 20
    assert np.allclose(m.width_um, 100.0, rtol=1e-3)
    assert np.allclose(m.depth_um, 50.0, rtol=1e-3)
    assert m.summary()["width_mean_um"] == pytest.approx(100.0, rel=1e-3)
    p = tmp_path / "t.csv"
    m.write_csv(p)
    rows = list(csv.reader(open(p)))
    assert len(rows) > 50


def test_no_melt_pool():
    r = _half_cylinder()
    r.state.T_peak[:] = 400.0
    with pytest.raises(NoMeltPoolError, match="no melt pool formed"):
        measure_width_depth(r)


def _wall(width=100e-6, height=400e-6, cell=5e-6):
    plan = ScanPlan((ScanSegment((0.0, 0.0, 0.0), (1e-3, 0.0, 0.0), speed=1.23, power=300.0),),
                    layer_thickness=40e-6, n_layers=10)
    g = Grid(60, 60, 100, 20e-6, cell, cell, origin=(-0.1e-3, -150e-6, -50e-6), substrate_top=0.0,
             powder_top=400e-6)
    y = g.y[None, :, None]
    z = g.z[None, None, :]
    alpha = np.broadcast_to(((np.abs(y) < width / 2) & (z > 0) & (z < height)) | (z < 0), g.shape).astype(float)
    return synthetic_result(g, alpha=alpha, plan=plan)


@pytest.mark.parametrize("zone", [1, 2, 3])
def test_rectangular_wall_area(zone):
    za = cross_section_area(_wall(), zone, ratio=1.0)
    assert np.allclose(za.area_um2, 4e4, rtol=1e-12)
    assert np.allclose(za.height_um, 400.0)


def test_zone_validation():
    with pytest.raises(ValueError):
        cross_section_area(_wall(), 4)
    single = _half_cylinder()
    with pytest.raises(ValueError, match="multi-layer"):
        cross_section_area(single, 2)


def test_default_area_uses_densification():
    za = cross_section_area(_wall(), 2)
    assert np.allclose(za.area_um2, 4e4 * density_ratio(IN625))


def _plane_map(h_fn, n=201, L=1e-3):
    u = np.linspace(0, L, n)
    v = np.linspace(0, L / 2, n // 2)
    U, V = np.meshgrid(u, v, indexing="ij")
    return SurfaceHeightMap(u, v, h_fn(U, V), np.ones(U.shape, dtype=bool))


def test_flat_tilted_plane():
    hm = _plane_map(lambda U, V: 1e-6 + 0.02 * U - 0.01 * V)
    assert roughness_ra(hm) == pytest.approx(0.0, abs=1e-9)


def test_sinusoid_ra():
    a, lam = 5e-6, 1e-4
    hm = _plane_map(lambda U, V: a * np.sin(2 * np.pi * U / lam) + 0.01 * U, n=2001)
    quad, _ = integrate.quad(lambda s: abs(np.sin(s)), 0, 2 * np.pi)
    oracle = a * quad / (2 * np.pi) * 1e6
    assert oracle == pytest.approx(2 * a / np.pi * 1e6, rel=1e-9)
    assert roughness_ra(hm) == pytest.approx(oracle, rel=0.01)


def test_collinear_support():
    u = np.linspace(0, 1e-3, 10)
    hm = SurfaceHeightMap(u, np.array([0.0]), np.zeros((10, 1)), np.ones((10, 1), dtype=bool))
    with pytest.raises(ValueError):
        roughness_ra(hm)


def _two_tracks(r=40e-6, hatch=100e-6, cap=True, cell=2e-6):
    plan = multi_track_plan(300.0, 1.23, hatch, 1e-3, 2)
    ny, nz = int(round(300e-6 / cell)), int(round(140e-6 / cell))
    g = Grid(20, ny, nz, 50e-6, cell, cell, origin=(-0.0, -100e-6, -40e-6), substrate_top=0.0, powder_top=100e-6)
    y = g.y[None, :, None]
    z = g.z[None, None, :]
    inside = np.zeros((1, g.ny, g.nz), dtype=bool)
    for yc in (0.0, hatch):
        inside |= ((y - yc) ** 2 + z ** 2 < r ** 2) & (z > 0)
    solid = inside | (z < 0)
    if cap:
        solid |= (z >= r) & (z < r + 40e-6)
    alpha = np.broadcast_to(solid, g.shape).astype(float)
    box = [(g.x[0], g.x[-1]), (0.0, hatch), (-20e-6, r + 40e-6)]
    return synthetic_result(g, alpha=alpha, plan=plan), box, g, solid


def test_wedge_gap_matches_voxel_count():
    res, box, g, solid = _two_tracks()
    rep = lof_porosity(res, box)
    yin = (g.y >= 0.0) & (g.y <= 100e-6)
    zin = (g.z >= -20e-6) & (g.z <= 80e-6)
    sub = solid[0][np.ix_(yin, zin)]
    pores = (~sub).sum() * g.nx
    assert rep.pore_volume == pytest.approx(pores * g.cell_volume, rel=1e-12)
    assert rep.pore_count == 1
    assert rep.fraction == pytest.approx(pores / (g.nx * yin.sum() * zin.sum()))


def test_open_valley_is_not_a_pore():
    res, box, *_ = _two_tracks(cap=False)
    box[2] = (-20e-6, 40e-6)
    rep = lof_porosity(res, box)
    assert rep.pore_count == 0 and rep.fraction == 0.0


def test_dense_block():
    res, box, g, _ = _two_tracks()
    res.state.alpha[:] = 1.0
    assert lof_porosity(res, box).fraction == 0.0
    with pytest.raises(ValueError, match="empty"):
        lof_porosity(res, [(5.0, 6.0), box[1], box[2]])


def test_ved_values():
    assert ved(300, 1230) == pytest.approx(60.98, abs=0.005)
    assert ved(241, 1529) == pytest.approx(39.40, abs=0.005)
    with pytest.raises(ValueError):
        ved(0, 1230)
    with pytest.raises(ValueError):
        ved(300, 1230, layer_thickness=-0.04)


def test_wall_roughness_of_flat_wall_is_small():
    res = _wall()
    # envelope side face: a straight wall
    y = res.grid.y[None, :, None]
    res.state.T_peak[:] = np.broadcast_to(TS + 1e6 * (50e-6 - np.abs(y)), res.grid.shape)
    ra, mean, std = wall_roughness(res, n_regions=5)
    assert ra.size == 5 and mean == pytest.approx(0.0, abs=1e-6)
