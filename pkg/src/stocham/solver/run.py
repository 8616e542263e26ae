"""Time loop, solver configuration and results."""
from __future__ import annotations

import functools
import os
import time as _time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np

from ..heatsource import EffectiveSource, HeatSourceCoefficients, deposit, effective_params, source_prefactor
from ..material import IN625, MaterialProperties, effective_property, k_volumetric_enthalpy
from ..scanpath import RhfConfig, ScanPlan, discretize, rhf_normalized
from .fluid import FluidParams, FluidStepper
from .grid import FieldState, Grid, grid_for_plan
from .kernels import advection_rhs, conduction_rhs, conductivity_field, fill_enthalpy, update_state

__all__ = [
    "SolverConfig",
    "ParameterSeries",
    "SimulationResult",
    "StabilityError",
    "SeriesExhaustedError",
    "max_stable_dt",
    "step_energy",
    "step_fluid",
    "run",
]


class StabilityError(ValueError):
    pass


class SeriesExhaustedError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    fidelity: str = "thermal_only"
    dt: float | None = None  # None: cfl_safety times the explicit bound
    cfl_safety: float = 0.9
    cell: float = 10e-6
    pad_lateral: float = 3e-4
    pad_end: float = 2e-4
    substrate_depth: float = 4e-4
    symmetric: bool | None = None
    radiation_on: bool = True
    convection_on: bool = True
    end_time: float | None = None  # extra time after the last scan point
    cooldown_max: float = 1e-3  # cap on the solidification wait after each layer
    output_stride: int = 0
    rhf_coupling: bool = True
    rhf_R: float = 2e-4
    rhf_T: float = 2e-3
    rhf_floor: float = 0.5
    max_fluid_cfl: float = 0.5

    def __post_init__(self) -> None:
        if self.fidelity not in ("thermal_only", "thermal_fluid"):
            raise ValueError("fidelity must be 'thermal_only' or 'thermal_fluid'")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive or None")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if not 0 < self.rhf_floor <= 1:
            raise ValueError("rhf_floor must lie in (0, 1]")

    @property
    def rhf(self) -> RhfConfig:
        return RhfConfig(self.rhf_R, self.rhf_T)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any] | None) -> "SolverConfig":
        d = dict(d or {})
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise KeyError(f"unknown solver keys: {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw: Any) -> "SolverConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class ParameterSeries:
    """Sampled (P1, P2, P3) in SI, one row per laser-on step."""

    values: np.ndarray
    intensity_factor: float = 1.0
    eta_floor: float = 0.28

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("parameter series must have shape (n, 3)")
        object.__setattr__(self, "values", v)

    def coeffs(self, j: int) -> HeatSourceCoefficients:
        if j >= len(self.values):
            raise SeriesExhaustedError(f"parameter series has {len(self.values)} rows; step {j} needs more")
        P1, P2, P3 = self.values[j]
        return HeatSourceCoefficients(max(P1, 0.0), max(P2, 0.0), max(P3, 0.0),
                                      self.intensity_factor, self.eta_floor)


@dataclass
class SimulationResult:
    grid: Grid
    state: FieldState
    plan: ScanPlan
    log: dict[str, np.ndarray]
    energy: dict[str, float]
    wall: dict[str, float]
    layer_tops: list[float]
    config: dict[str, Any]
    props: MaterialProperties = IN625
    snapshots: list[str] = field(default_factory=list)

    @property
    def T_peak(self) -> np.ndarray:
        return self.state.T_peak

    @property
    def consolidation(self) -> np.ndarray:
        return self.state.alpha

    @property
    def envelope(self) -> np.ndarray:
        """Cells that were ever (partly) liquid."""
        return self.state.T_peak > self.props.T_solidus

    def write_log(self, path: str | os.PathLike) -> None:
        cols = ["step", "time_s", "T_max_K", "melt_volume_m3", "eta", "r_b_m", "d_m", "rhf"]
        data = np.column_stack([self.log[c] for c in cols])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in data:
                fh.write(f"{int(row[0])}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")


@functools.lru_cache(maxsize=32)
def _max_diffusivity(props: MaterialProperties) -> float:
    Ts = np.linspace(1.0, 3500.0, 3500)
    best = 0.0
    for a in (0.0, 1.0):
        k = effective_property(Ts, a, "conductivity", props)
        c = effective_property(Ts, a, "specific_heat", props)
        r = effective_property(Ts, a, "density", props)
        best = max(best, float(np.max(k / (r * c))))
    return best


def max_stable_dt(grid: Grid, props: MaterialProperties = IN625) -> float:
    """Explicit conduction bound min(dx^2) / (6 max diffusivity)."""
    h2 = min(grid.dx, grid.dy, grid.dz) ** 2
    return h2 / (6.0 * _max_diffusivity(props))


class _Scratch:
    def __init__(self, shape):
        self.kc = np.zeros(shape)
        self.rate = np.zeros(shape)
        self.src = np.zeros(shape)


def step_energy(state: FieldState, grid: Grid, dt: float, source_field: np.ndarray | None = None,
                props: MaterialProperties = IN625, radiation_on: bool = True, convection_on: bool = True,
                scratch: _Scratch | None = None, check_stability: bool = True,
                source_power: float | None = None) -> dict[str, float]:
    """Advance the enthalpy field by one explicit conduction step.

    ``source_field`` holds absorbed power per cell (W); pass its sum as
    ``source_power`` to skip the reduction. Advection by the melt flow is a
    separate split step (see :func:`step_fluid`). Returns the energy terms of
    this step (J) plus the max temperature and liquid cell count.
    """
    if check_stability:
        bound = max_stable_dt(grid, props)
        if dt > bound * (1 + 1e-12):
            raise StabilityError(f"dt = {dt:.4e} s exceeds the explicit limit; max admissible dt = {bound:.4e} s")
    sc = scratch or _Scratch(grid.shape)
    p = props.as_array()
    src = sc.src if source_field is None else source_field
    conductivity_field(state.T, state.alpha, state.active, p, sc.kc)
    h_c = props.convection_coeff if convection_on else 0.0
    es = props.emissivity * props.stefan_boltzmann_si if radiation_on else 0.0
    top, bot = conduction_rhs(state.T, sc.kc, state.active, src, grid.dx, grid.dy, grid.dz,
                              h_c, es, props.T_ambient, props.T_preheat, sc.rate)
    consol, Tmax, n_liq = update_state(state.E, state.T, state.f_l, state.alpha, state.T_peak,
                                       state.active, sc.rate, dt, grid.cell_volume, p)
    state.time += dt
    state.step += 1
    if source_field is None:
        deposited = 0.0
    else:
        deposited = (float(np.sum(src)) if source_power is None else source_power) * dt
    return {"deposited": deposited, "top_loss": top * dt, "bottom_loss": bot * dt,
            "consolidation": consol, "T_max": Tmax, "n_liquid": n_liq}


def _advect(state: FieldState, grid: Grid, dt: float, box) -> None:
    (i0, i1), (j0, j1), (k0, k1) = box
    rate = np.zeros((i1 - i0, j1 - j0, k1 - k0))
    advection_rhs(state.E, state.ux, state.uy, state.uz, grid.dx, grid.dy, grid.dz,
                  i0, i1, j0, j1, k0, k1, rate)
    state.E[i0:i1, j0:j1, k0:k1] += dt / grid.cell_volume * rate


def step_fluid(state: FieldState, grid: Grid, dt: float, props: MaterialProperties = IN625,
               stepper: FluidStepper | None = None) -> float:
    """Advance the melt flow by ``dt``; returns max |u| (m/s)."""
    stepper = stepper or FluidStepper(FluidParams.from_props(props), grid)
    return stepper.step(state, dt)


def _activate_layer(state: FieldState, grid: Grid, lo: float, hi: float, props: MaterialProperties) -> float:
    """Fill cells in [lo, hi) with powder at preheat; returns the energy added (J)."""
    k0, k1 = grid.layer_index(lo), grid.layer_index(hi)
    if k1 > grid.nz:
        raise ValueError("grid too small for the requested layers")
    p = props.as_array()
    E0 = k_volumetric_enthalpy(props.T_preheat, 0.0, p)
    sl = (slice(None), slice(None), slice(k0, k1))
    state.active[sl] = True
    state.alpha[sl] = 0.0
    state.T[sl] = props.T_preheat
    state.T_peak[sl] = props.T_preheat
    state.f_l[sl] = 0.0
    state.E[sl] = E0
    return float(E0 * grid.cell_volume * grid.nx * grid.ny * (k1 - k0))


def _reset_temperature(state: FieldState, grid: Grid, props: MaterialProperties) -> float:
    """Cool every active cell to preheat (inter-layer wait); returns the energy change (J)."""
    before = state.total_energy(grid)
    act = state.active
    state.T[act] = props.T_preheat
    state.f_l[act] = 0.0
    fill_enthalpy(state.E, state.T, state.alpha, act, props.as_array())
    state.ux[:] = 0.0
    state.uy[:] = 0.0
    state.uz[:] = 0.0
    state.p[:] = 0.0
    return state.total_energy(grid) - before


def _check_fits(plan: ScanPlan, grid: Grid) -> None:
    lo, hi = plan.bounds
    glo, ghi = grid.extent
    tol = 1e-12
    ok = (lo[0] >= glo[0] - tol and hi[0] <= ghi[0] + tol and hi[1] <= ghi[1] + tol
          and lo[1] >= glo[1] - tol)
    if not ok:
        raise ValueError("grid too small to contain the scan plan")
    top = grid.substrate_top + plan.n_layers * plan.layer_thickness
    if top > ghi[2] + 1e-12:
        raise ValueError("grid too small to contain all layers of the scan plan")


def run(plan: ScanPlan, source: HeatSourceCoefficients | ParameterSeries,
        config: SolverConfig = SolverConfig(), props: MaterialProperties = IN625,
        grid: Grid | None = None, snapshot_dir: str | os.PathLike | None = None,
        progress: Callable[[int, int], None] | None = None) -> SimulationResult:
    """Simulate ``plan`` with fixed coefficients or a sampled parameter series."""
    if not plan.segments:
        raise ValueError("empty plan")
    t_start = _time.perf_counter()
    grid = grid or grid_for_plan(plan, config.cell, config.pad_lateral, config.pad_end,
                                 config.substrate_depth, config.symmetric)
    _check_fits(plan, grid)
    dt = config.dt or config.cfl_safety * max_stable_dt(grid, props)
    bound = max_stable_dt(grid, props)
    if dt > bound * (1 + 1e-12):
        raise StabilityError(f"dt = {dt:.4e} s exceeds the explicit limit; max admissible dt = {bound:.4e} s")
    pts = discretize(plan, dt)
    if isinstance(source, ParameterSeries) and len(source.values) < pts.n_laser_on:
        raise SeriesExhaustedError(f"parameter series has {len(source.values)} rows but the plan has "
                                   f"{pts.n_laser_on} laser-on steps")
    rhf = rhf_normalized(pts, config.rhf) if config.rhf_coupling else np.ones(len(pts))
    rhf = np.maximum(rhf, config.rhf_floor)

    t_layer = plan.layer_thickness
    layer_tops = [grid.substrate_top + (k + 1) * t_layer for k in range(plan.n_layers)]
    state = FieldState.initial(grid, props, top=grid.substrate_top)
    energy = {"initial": 0.0, "deposited": 0.0, "top_loss": 0.0, "bottom_loss": 0.0,
              "consolidation": 0.0, "reinit": 0.0}
    energy["reinit"] += _activate_layer(state, grid, grid.substrate_top, layer_tops[0], props)
    energy["initial"] = state.total_energy(grid) - energy["reinit"]
    sc = _Scratch(grid.shape)
    stepper = FluidStepper(FluidParams.from_props(props), grid) if config.fidelity == "thermal_fluid" else None
    xg, yg = grid.x, grid.y
    zlo = grid.z_faces[:-1].copy()
    zhi = grid.z_faces[1:].copy()

    log = {k: [] for k in ("step", "time_s", "T_max_K", "melt_volume_m3", "eta", "r_b_m", "d_m", "rhf")}
    snapshots: list[str] = []
    from .snapshot import save_snapshot

    def advance(src_on: bool, params=(0.0, 0.0, 0.0), rhf_i=0.0, power=0.0):
        if stepper is not None:
            _fluid_block(state, grid, dt, stepper, config)
        out = step_energy(state, grid, dt, sc.src if src_on else None, props, config.radiation_on,
                          config.convection_on, sc, check_stability=False, source_power=power)
        for key in ("deposited", "top_loss", "bottom_loss", "consolidation"):
            energy[key] += out[key]
        log["step"].append(state.step)
        log["time_s"].append(state.time)
        log["T_max_K"].append(out["T_max"])
        log["melt_volume_m3"].append(out["n_liquid"] * grid.cell_volume)
        log["eta"].append(params[0])
        log["r_b_m"].append(params[1])
        log["d_m"].append(params[2])
        log["rhf"].append(rhf_i)
        if snapshot_dir is not None and config.output_stride and state.step % config.output_stride == 0:
            path = os.path.join(os.fspath(snapshot_dir), f"snapshot_{state.step:07d}.stc")
            save_snapshot(path, grid, state)
            snapshots.append(path)
        return out

    def cooldown(limit: float):
        t_end = state.time + limit
        while state.time < t_end - 1e-15:
            out = advance(False)
            if out["n_liquid"] == 0 and out["T_max"] < props.T_solidus:
                break

    layer = 0
    j_on = 0
    n = len(pts)
    for s in range(n):
        if pts.layer[s] != layer:
            cooldown(config.cooldown_max)
            energy["reinit"] += _reset_temperature(state, grid, props)
            layer = int(pts.layer[s])
            energy["reinit"] += _activate_layer(state, grid, layer_tops[layer - 1], layer_tops[layer], props)
        if pts.laser[s]:
            if isinstance(source, ParameterSeries):
                coeffs = source.coeffs(j_on)
            else:
                coeffs = source
            j_on += 1
            P, V = float(pts.power[s]), float(pts.speed[s])
            d, eta, r_b = effective_params(P, V, float(rhf[s]), coeffs)
            if d <= 0 or r_b <= 0:
                # degenerate sampled source deposits nothing
                advance(False, (eta, r_b, d), float(rhf[s]))
                continue
            src = EffectiveSource(eta=eta, r_b=r_b, d=d, power=P, center=(pts.position[s, 0], pts.position[s, 1]),
                                  z_top=layer_tops[layer], intensity_factor=coeffs.intensity_factor)
            win = _source_window(grid, src)
            q = deposit(sc.src, xg, yg, zlo, zhi, grid.dx, grid.dy, src.center[0], src.center[1], src.z_top,
                        source_prefactor(src), r_b, d, *win)
            advance(True, (eta, r_b, d), float(rhf[s]), q)
            i0, i1, j0, j1, k0, k1 = win
            sc.src[i0:i1, j0:j1, k0:k1] = 0.0
        else:
            advance(False, (0.0, 0.0, 0.0), float(rhf[s]))
        if progress is not None and s % 1000 == 0:
            progress(s, n)
    if config.end_time is not None:
        t_end = state.time + config.end_time
        while state.time < t_end - 1e-15:
            advance(False)
    else:
        cooldown(config.cooldown_max)

    total = state.total_energy(grid)
    energy["final"] = total
    energy["budget_residual"] = (total - energy["initial"]) - (
        energy["deposited"] - energy["top_loss"] - energy["bottom_loss"]
        + energy["consolidation"] + energy["reinit"])
    wall = {"seconds": _time.perf_counter() - t_start, "steps": float(state.step), "dt": dt,
            "cells": float(grid.nx * grid.ny * grid.nz)}
    return SimulationResult(grid=grid, state=state, plan=plan,
                            log={k: np.asarray(v) for k, v in log.items()}, energy=energy, wall=wall,
                            layer_tops=layer_tops, config=config.to_dict(), props=props,
                            snapshots=snapshots)


def _source_window(grid: Grid, src: EffectiveSource):
    reach = 3.0 * src.r_b
    x0, y0, z0 = grid.origin
    i0 = max(0, int(np.floor((src.center[0] - reach - x0) / grid.dx)))
    i1 = min(grid.nx, int(np.ceil((src.center[0] + reach - x0) / grid.dx)) + 1)
    j0 = max(0, int(np.floor((src.center[1] - reach - y0) / grid.dy)))
    j1 = min(grid.ny, int(np.ceil((src.center[1] + reach - y0) / grid.dy)) + 1)
    k0 = max(0, int(np.floor((src.z_top - src.d - z0) / grid.dz)))
    k1 = min(grid.nz, int(np.ceil((src.z_top - z0) / grid.dz)))
    return i0, i1, j0, j1, k0, k1


def _fluid_block(state: FieldState, grid: Grid, dt: float, stepper: FluidStepper, config: SolverConfig) -> None:
    """Flow update plus advection of E, sub-cycled to respect the advective CFL."""
    h = min(grid.dx, grid.dy, grid.dz)
    umax = stepper.last_umax
    n_sub = max(1, int(np.ceil(umax * dt / (config.max_fluid_cfl * h))))
    sub = dt / n_sub
    for _ in range(n_sub):
        umax = stepper.step(state, sub)
        if stepper.box is None:
            break
        if umax * sub > h:
            raise StabilityError(f"melt velocity {umax:.3g} m/s violates the advective limit at dt {sub:.3e} s")
        _advect(state, grid, sub, stepper.box)


def plan_steps(plan: ScanPlan, config: SolverConfig = SolverConfig(), props: MaterialProperties = IN625,
               grid: Grid | None = None) -> tuple[float, int]:
    """(dt, number of laser-on steps) that :func:`run` will use for ``plan``."""
    grid = grid or grid_for_plan(plan, config.cell, config.pad_lateral, config.pad_end,
                                 config.substrate_depth, config.symmetric)
    dt = config.dt or config.cfl_safety * max_stable_dt(grid, props)
    return dt, discretize(plan, dt).n_laser_on


def _props_from_dict(d: Mapping[str, Any]) -> MaterialProperties:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return MaterialProperties.from_mapping(d)


def save_result(path: str | os.PathLike, result: SimulationResult, extra: dict | None = None) -> str:
    """Final fields plus everything measurements need (plan, material, layer tops)."""
    from .snapshot import save_snapshot

    meta = {"plan": result.plan.to_dict(), "props": result.props.to_dict(), "layer_tops": list(result.layer_tops),
            "config": result.config, "energy": {k: v for k, v in result.energy.items()}}
    if extra:
        meta.update(extra)
    return save_snapshot(path, result.grid, result.state, {"result": meta})


def load_result(path: str | os.PathLike) -> SimulationResult:
    """Inverse of :func:`save_result`; velocities come back cell-centred only."""
    from ..scanpath import plan_from_dict
    from .snapshot import load_snapshot

    grid, arrays, meta = load_snapshot(path)
    if "result" not in meta:
        raise ValueError(f"{path} is a bare snapshot without result metadata")
    rm = meta["result"]
    props = _props_from_dict(rm["props"])
    nx, ny, nz = grid.shape
    state = FieldState(T=arrays["T"], E=np.zeros(grid.shape), f_l=arrays["f_l"], T_peak=arrays["T_peak"],
                       alpha=arrays["alpha"], active=arrays["active"], p=arrays["p"],
                       ux=np.zeros((nx + 1, ny, nz)), uy=np.zeros((nx, ny + 1, nz)), uz=np.zeros((nx, ny, nz + 1)),
                       time=float(meta["time"]), step=int(meta["step"]))
    return SimulationResult(grid=grid, state=state, plan=plan_from_dict(rm["plan"]), log={},
                            energy=rm.get("energy", {}), wall={}, layer_tops=list(rm["layer_tops"]),
                            config=rm.get("config", {}), props=props)
