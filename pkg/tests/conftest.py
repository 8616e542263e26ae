import numpy as np
import pytest

from stocham.material import IN625
from stocham.solver import FieldState, Grid


def closed_box(n=(12, 10, 8), cell=10e-6, T0=None, props=IN625):
    """Fully consolidated block whose bottom cell layer is inactive, so no face leaks."""
    g = Grid(*n, cell, cell, cell, substrate_top=n[2] * cell, powder_top=n[2] * cell)
    s = FieldState.initial(g, props, T0=T0)
    s.active[:, :, 0] = False
    return g, s


@pytest.fixture
def box():
    return closed_box()


def synthetic_result(grid, T_peak=None, alpha=None, plan=None, layer_tops=None, props=IN625):
    """SimulationResult wrapper around hand-built fields for measurement tests."""
    from stocham.scanpath import single_track_plan
    from stocham.solver import SimulationResult

    s = FieldState.initial(grid, props)
    if T_peak is not None:
        s.T_peak[:] = T_peak
    if alpha is not None:
        s.alpha[:] = alpha
    plan = plan or single_track_plan(300.0, 1.23, 1e-3, layer_thickness=0.0)
    if layer_tops is None:
        layer_tops = [grid.substrate_top + (k + 1) * plan.layer_thickness for k in range(plan.n_layers)]
    return SimulationResult(grid=grid, state=s, plan=plan, log={}, energy={}, wall={}, layer_tops=layer_tops,
                            config={}, props=props)


SYN_TRUTH = np.array([0.5, 2.6, 0.22])


def synthetic_model(n=6):
    """HOPGD fit of an identifiable analytic width/depth law over the default box."""
    from stocham.surrogate import SnapshotDatabase, default_grid, hopgd_fit

    g = default_grid(n)
    E, A, B, C = np.meshgrid(*g.axes, indexing="ij")
    W = 40 + 250 * E * C + 30 * A * (E / 0.24) ** 6
    D = 20 + 20 * B * (0.24 / E) ** 4 + 100 * E * A
    return hopgd_fit(SnapshotDatabase(g, W, D), tol=1e-6)


def synthetic_experiment(model, dist, n=2000, seed=99):
    """Bundled case list with width/depth samples propagated through ``model``."""
    from stocham.calibrate import CaseData, ExperimentDataset, load_dataset, propagate

    cases = {}
    for c in load_dataset():
        w, d = propagate(model, dist, c, n, seed=seed)
        cases[c.case] = CaseData(c.case, c.P, c.V, w, d)
    return ExperimentDataset(cases, "synthetic")


def point_experiment(model, p):
    """Bundled case list with two-sample sets centred on the surrogate output at ``p``."""
    from stocham.calibrate import CaseData, ExperimentDataset, load_dataset

    cases = {}
    for c in load_dataset():
        w, d = model.evaluate(c.e, *p)
        cases[c.case] = CaseData(c.case, c.P, c.V, np.array([w - 1, w + 1]), np.array([d - 1, d + 1]))
    return ExperimentDataset(cases, "synthetic")


@pytest.fixture(scope="session")
def syn_model():
    return synthetic_model()
