import numpy as np
import pytest

from stocham.scanpath import (PRESET_IDS, RhfConfig, ScanPath, ScanPlan, ScanSegment, afr_preset, discretize,
                              multi_track_plan, plan_from_dict, rhf_all, rhf_normalized, rhf_raw,
                              single_track_plan)


def _path(pos, time, laser):
    n = len(time)
    return ScanPath(np.asarray(pos, float), np.asarray(time, float), np.asarray(laser, np.int64),
                    np.full(n, 300.0), np.full(n, 1.0), np.zeros(n, np.int64))


def test_discretize_spacing():
    p = discretize(single_track_plan(300.0, 1.0, 1e-3), 1e-4)
    assert len(p) == 11
    assert np.allclose(np.diff(p.position[:, 0]), 1e-4)
    assert np.all(p.laser == 1)


def test_discretize_dwell_points():
    plan = multi_track_plan(300.0, 1.0, 1e-4, 1e-3, 2, dwell_time=0.5e-3)
    p = discretize(plan, 1e-4)
    assert len(p) == 11 + 5 + 11
    assert np.count_nonzero(p.laser == 0) == 5


def test_empty_plan():
    p = discretize(ScanPlan(()), 1e-4)
    assert len(p) == 0
    assert rhf_all(p).size == 0


def test_laser_off_segment():
    seg = ScanSegment((0, 0, 0), (0, 0, 0), speed=1.0, power=0.0, laser_on=False)
    p = discretize(ScanPlan((seg,)), 1e-4)
    assert np.all(p.laser == 0)
    assert np.all(rhf_all(p) == 0)


def test_rhf_raw_values():
    cfg = RhfConfig(R=2e-4, T_thresh=2e-3)
    p = _path([[0, 0, 0], [1e-4, 0, 0]], [0.0, 1e-3], [1, 1])
    assert rhf_raw(0, p, cfg) == 0.0
    assert rhf_raw(1, p, cfg) == pytest.approx(0.125)
    far = _path([[0, 0, 0], [4e-4, 0, 0]], [0.0, 1e-4], [1, 1])
    assert rhf_raw(1, far, cfg) == 0.0


def test_rhf_window_matches_brute_force():
    plan = multi_track_plan(300.0, 1.0, 1e-4, 6e-4, 2, dwell_time=2e-4)
    p = discretize(plan, 2e-5)
    fast = rhf_all(p)
    slow = np.array([rhf_raw(i, p) for i in range(len(p))])
    assert np.allclose(fast, slow, rtol=1e-12, atol=1e-14)


def test_rhf_normalization():
    single = discretize(single_track_plan(300.0, 1.0, 2e-3), 1e-5)
    r = rhf_normalized(single)
    mid = int(np.argmin(np.abs(single.time - 0.5 * single.time[-1])))
    assert r[mid] == pytest.approx(1.0, abs=1e-9)
    serp = discretize(multi_track_plan(300.0, 1.0, 1e-4, 1e-3, 3, dwell_time=0.0), 1e-5)
    rs = rhf_normalized(serp)
    assert rs[0] < 1.0
    # just past the turn-around the previous track end adds to the own tail
    second = np.flatnonzero(np.isclose(serp.position[:, 1], 1e-4))
    assert rs[second[:30]].max() > 1.0
    assert rs[second[len(second) // 2]] == pytest.approx(1.0, abs=1e-9)


def test_presets():
    a1 = afr_preset("A1")
    assert a1.n_layers == 1 and len(a1.segments) == 1
    assert a1.segments[0].power == 300.0
    assert a1.segments[0].speed == pytest.approx(1.23)
    b2 = afr_preset("B2")
    assert b2.n_layers == 10 and b2.layer_thickness == pytest.approx(40e-6)
    assert b2.segments[0].length == pytest.approx(5e-3)
    assert (b2.segments[0].power, b2.segments[0].speed) == (241.0, pytest.approx(1.529))
    c3 = afr_preset("C3")
    assert len(c3.segments) == 40 and c3.hatch_spacing == pytest.approx(75e-6)
    assert c3.segments[0].length == pytest.approx(10e-3)


def test_unknown_preset_names_valid_ids():
    with pytest.raises(KeyError) as exc:
        afr_preset("Z9")
    assert "A1" in str(exc.value) and "C6" in str(exc.value)


def test_plan_dict_roundtrip():
    for cid in ("A3", "B1", "C5"):
        p = afr_preset(cid, n_tracks=3) if cid.startswith("C") else afr_preset(cid)
        q = plan_from_dict(p.to_dict())
        assert q.n_layers == p.n_layers and len(q.segments) == len(p.segments)
        for s, t in zip(p.segments, q.segments):
            assert np.allclose(s.start, t.start) and np.allclose(s.end, t.end)
            assert s.power == t.power and s.speed == pytest.approx(t.speed)
    assert len(PRESET_IDS) == 19
