import numpy as np
import pytest

from conftest import SYN_TRUTH, point_experiment, synthetic_experiment
from stocham.calibrate import (CalibrationError, CaseData, DatasetError, ExperimentDataset, StochasticCalibration,
                               Summary, calibrate_deterministic, calibrate_stochastic, load_dataset,
                               parameter_series, propagate, sample_experiment, stochastic_objective)
from stocham.stats import TrivariateNormal
from stocham.surrogate import OutOfBoxError

CASES = [f"A{i}" for i in range(1, 12)]


def _truth(frac=0.08):
    return TrivariateNormal.from_cov(SYN_TRUTH, np.diag((frac * SYN_TRUTH) ** 2))


def test_bundled_dataset():
    ds = load_dataset(require_all=True)
    assert sorted(ds.ids, key=lambda c: int(c[1:])) == CASES
    a1 = ds["A1"]
    assert (a1.P, a1.V) == (300, 1230)
    assert a1.width == Summary(111.9, 10.9, 50)


def test_a1_pseudo_samples_match_moments():
    w, d = sample_experiment(load_dataset(), "A1")
    assert w.size == 50 and d.size == 20
    assert w.mean() == pytest.approx(111.9, abs=1e-10)
    assert w.std(ddof=1) == pytest.approx(10.9, abs=1e-10)
    assert d.mean() == pytest.approx(113.3, abs=1e-10)
    w2, _ = sample_experiment(load_dataset(), "A1")
    assert np.array_equal(w, w2)


def test_raw_samples_unchanged_and_errors():
    raw = np.array([100.0, 104.0, 98.0])
    ds = ExperimentDataset({"X": CaseData("X", 300, 1000, raw, Summary(90, 5, 1))})
    with pytest.raises(DatasetError, match="n >= 2"):
        sample_experiment(ds, "X")
    ds.cases["X"].depth = raw + 1
    w, d = sample_experiment(ds, "X")
    assert np.array_equal(w, raw)
    with pytest.raises(KeyError):
        sample_experiment(ds, "A1")


def test_missing_case_is_error(tmp_path):
    ds = load_dataset()
    ds.subset([c for c in CASES if c != "A7"]).to_csv(tmp_path / "d.csv")
    part = load_dataset(tmp_path / "d.csv")
    assert len(part) == 10
    with pytest.raises(DatasetError, match="A7"):
        load_dataset(tmp_path / "d.csv", require_all=True)


def test_csv_roundtrip(tmp_path):
    ds = load_dataset()
    ds.cases["A1"].width = np.array([110.0, 112.5, 113.25])
    ds.to_csv(tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(back["A1"].width, [110.0, 112.5, 113.25])
    assert back["A2"].depth == ds["A2"].depth


def test_malformed_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("case,P_W,V_mm_s,quantity,mean_um,std_um,n,values_um\nA1,300,-5,width,1,1,5,\n")
    with pytest.raises(DatasetError, match="row 2"):
        load_dataset(p)


def test_deterministic_round_trip(syn_model):
    data = point_experiment(syn_model, SYN_TRUTH)
    r = calibrate_deterministic(syn_model, data)
    assert np.allclose(r.p, SYN_TRUTH, rtol=0.01)
    assert np.all(r.objective <= r.start_objectives)
    assert len(r.starts) == 16


def test_deterministic_permutation_invariant(syn_model):
    data = point_experiment(syn_model, [0.45, 2.9, 0.25])
    rev = ExperimentDataset(dict(reversed(list(data.cases.items()))))
    a = calibrate_deterministic(syn_model, data, n_starts=4)
    b = calibrate_deterministic(syn_model, rev, n_starts=4)
    assert np.array_equal(a.p, b.p) and a.objective == b.objective


def test_collapsed_bounds(syn_model):
    data = point_experiment(syn_model, SYN_TRUTH)
    bounds = [[0.4, 0.4], [2.0, 2.0], [0.2, 0.2]]
    r = calibrate_deterministic(syn_model, data, bounds=bounds)
    assert np.array_equal(r.p, [0.4, 2.0, 0.2])
    with pytest.raises(ValueError):
        calibrate_deterministic(syn_model, data, bounds=[[0.0, 1.0], [2, 3], [0.2, 0.3]])


def test_propagate_contract(syn_model):
    c = load_dataset()["A1"]
    tiny = TrivariateNormal(SYN_TRUTH, np.eye(3) * 1e-12)
    w, d = propagate(syn_model, tiny, c, 500, seed=1)
    assert w.size == 500 and d.size == 500
    w0, d0 = syn_model.evaluate(c.e, *SYN_TRUTH)
    assert np.allclose(w, w0, rtol=1e-9) and np.allclose(d, d0, rtol=1e-9)
    v = [np.var(propagate(syn_model, _truth(f), c, 2000, seed=2)[0]) for f in (0.04, 0.08)]
    assert v[1] > v[0]
    with pytest.raises(ValueError):
        propagate(syn_model, tiny, c, 50)
    wide = TrivariateNormal.from_cov(SYN_TRUTH, np.diag(SYN_TRUTH ** 2))
    with pytest.raises(OutOfBoxError, match="widen"):
        propagate(syn_model, wide, c, 500)


def test_objective_deterministic_and_bit_identical(syn_model):
    data = synthetic_experiment(syn_model, _truth(), seed=0)
    f1, b1 = stochastic_objective(syn_model, data, _truth())
    f2, b2 = stochastic_objective(syn_model, data, _truth())
    assert f1 == f2 and b1 == b2
    assert set(b1) == set(CASES)
    assert f1 < 1e-6


def test_init_at_truth_stays(syn_model):
    data = synthetic_experiment(syn_model, _truth(), seed=0)
    r = calibrate_stochastic(syn_model, data, init=_truth(), n_starts=1, maxfev=150)
    assert r.objective < 0.05
    assert np.allclose(r.dist.mean, SYN_TRUTH, rtol=0.01)
    assert all(a > b for a, b in zip(r.trace, r.trace[1:]))


def test_stochastic_trace_and_persistence(syn_model, tmp_path):
    data = synthetic_experiment(syn_model, _truth())
    init = TrivariateNormal.from_cov(SYN_TRUTH * 1.05, np.diag((0.1 * SYN_TRUTH) ** 2))
    r = calibrate_stochastic(syn_model, data, init=init, n_starts=1, maxfev=300)
    assert r.start_objectives[0] >= r.objective
    assert all(a > b for a, b in zip(r.trace, r.trace[1:]))
    assert r.objective == pytest.approx(sum(v["width"] + v["depth"] for v in r.per_case.values()))
    r.save(tmp_path / "s.json")
    back = StochasticCalibration.load(tmp_path / "s.json")
    assert np.array_equal(back.dist.cov, r.dist.cov) and back.objective == r.objective


def test_degenerate_case_named(syn_model):
    data = synthetic_experiment(syn_model, _truth())
    # a collapsed distribution gives zero-spread width samples for every case
    tiny = TrivariateNormal(SYN_TRUTH, np.eye(3) * 1e-300)
    with pytest.raises(CalibrationError, match="A"):
        stochastic_objective(syn_model, data, tiny)


def test_parameter_series_units():
    from stocham.heatsource import MM_TO_SI
    from stocham.stats import ChainConfig

    s = parameter_series(TrivariateNormal(SYN_TRUTH, np.eye(3) * 1e-12), 50, ChainConfig(step=1e-12, burn_in=0))
    assert len(s.values) == 50
    si = SYN_TRUTH * np.array([MM_TO_SI["P1"], MM_TO_SI["P2"], MM_TO_SI["P3"]])
    assert np.allclose(s.values, si, rtol=1e-9)
    assert s.coeffs(49) == s.coeffs(0)
