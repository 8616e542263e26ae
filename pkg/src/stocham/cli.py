"""Command line pipeline: simulate, surrogate, calibrate, measure, report.

Every stage writes its artifacts plus one ``manifest.json`` into its output
directory. Stage seeds derive from the global seed as
``SeedSequence(seed, spawn_key=(stage_index, run_index))`` so the split does
not depend on scheduling. Failures exit nonzero and print one JSON line
``{"error": {"category": ..., "message": ...}}`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from . import __version__

STAGES = {"simulate": 1, "surrogate": 2, "calibrate": 3, "sample": 4, "measure": 5}
EXIT_CODES = {"internal": 1, "config": 2, "missing_artifact": 3, "validation": 4, "numerical": 5,
              "incomplete": 6}


class PipelineError(Exception):
    def __init__(self, category: str, message: str):
        if category not in EXIT_CODES:
            category = "internal"
        self.category = category
        super().__init__(message)


# ---------------------------------------------------------------------------
# configuration and manifests
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {"material", "solver", "grid", "calibration_bounds", "chain", "cases", "out", "seed",
                "heat_source", "surrogate", "calibration", "dataset", "measure", "plan_options"}


@dataclass
class PipelineConfig:
    material: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    grid: dict = field(default_factory=lambda: {"nodes": 6})
    calibration_bounds: list | None = None
    chain: dict = field(default_factory=dict)
    cases: list = field(default_factory=lambda: [f"A{i}" for i in range(1, 12)])
    out: str = "out"
    seed: int | None = None
    heat_source: dict | None = None
    surrogate: dict = field(default_factory=dict)
    calibration: str | None = None
    dataset: str | None = None
    measure: dict = field(default_factory=dict)
    plan_options: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "PipelineConfig":
        if path is None:
            return cls()
        if not os.path.exists(path):
            raise PipelineError("config", f"config file not found: {path}")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PipelineError("config", f"{path}: invalid JSON ({exc})")
        unknown = sorted(set(data) - _CONFIG_KEYS)
        if unknown:
            raise PipelineError("config", f"{path}: unknown keys {unknown}")
        base = os.path.dirname(os.path.abspath(path))
        for key in ("calibration", "dataset"):
            if data.get(key) and data[key] != "bundled":
                p = data[key] if os.path.isabs(data[key]) else os.path.join(base, data[key])
                if not os.path.exists(p):
                    raise PipelineError("config", f"{path}: {key} file not found: {data[key]}")
                data[key] = p
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in sorted(_CONFIG_KEYS)}

    def hash(self, extra: dict | None = None) -> str:
        blob = json.dumps({**self.to_dict(), **(extra or {})}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_rng(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STAGES[stage], index)))


def stage_seed(seed: int, stage: str, index: int = 0) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(STAGES[stage], index))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def write_manifest(out: str, stage: str, cfg: PipelineConfig, inputs: dict[str, str], outputs: Sequence[str],
                   started: str, extra: dict | None = None) -> str:
    man = {
        "stage": stage,
        "config_hash": cfg.hash(extra),
        "inputs": {k: file_hash(v) for k, v in sorted(inputs.items()) if v and os.path.exists(v)},
        "outputs": {os.path.basename(p): file_hash(p) for p in sorted(outputs)},
        "tool_version": __version__,
        "seed": cfg.seed,
        "started": started,
        "finished": _now(),
        "args": extra or {},
    }
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: str, obj: Any) -> str:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _bundled(name: str) -> str:
    return str(resources.files("stocham") / "data" / name)


def _need_seed(cfg: PipelineConfig, stage: str) -> int:
    if cfg.seed is None:
        raise PipelineError("config", f"stage '{stage}' is stochastic and needs --seed (or 'seed' in the config)")
    return int(cfg.seed)


def _workers(arg: int | None) -> int:
    if arg is not None:
        return arg
    try:
        return int(os.environ.get("STOCHAM_WORKERS", "1"))
    except ValueError:
        raise PipelineError("config", "STOCHAM_WORKERS must be an integer")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _props(cfg: PipelineConfig):
    from .material import MaterialProperties

    try:
        return MaterialProperties.from_mapping(cfg.material)
    except (KeyError, TypeError, ValueError) as exc:
        raise PipelineError("config", f"material: {exc}")


def _solver_config(cfg: PipelineConfig, **over):
    from .solver import SolverConfig

    try:
        return SolverConfig.from_mapping({**cfg.solver, **{k: v for k, v in over.items() if v is not None}})
    except (KeyError, TypeError, ValueError) as exc:
        raise PipelineError("config", f"solver: {exc}")


def _calibration_dir(path: str | None) -> str | None:
    if path in (None, ""):
        return None
    if path == "bundled":
        return "bundled"
    if not os.path.exists(path):
        raise PipelineError("missing_artifact", f"calibration artifact not found: {path}; run the 'calibrate' stage")
    return path


def _load_stochastic(path: str):
    from .calibrate import StochasticCalibration

    p = _bundled("calibration_stochastic.json") if path == "bundled" else (
        os.path.join(path, "stochastic.json") if os.path.isdir(path) else path)
    if not os.path.exists(p):
        raise PipelineError("missing_artifact", f"no stochastic calibration at {path}; run the 'calibrate' stage")
    return StochasticCalibration.load(p), p


def _deterministic_coeffs(cfg: PipelineConfig, calib: str | None):
    from .heatsource import HeatSourceCoefficients

    if cfg.heat_source:
        try:
            return HeatSourceCoefficients.from_mapping(cfg.heat_source), None
        except (KeyError, TypeError, ValueError) as exc:
            raise PipelineError("config", f"heat_source: {exc}")
    if calib is None:
        calib = "bundled"
    p = _bundled("calibration_deterministic.json") if calib == "bundled" else (
        os.path.join(calib, "deterministic.json") if os.path.isdir(calib) else calib)
    if not os.path.exists(p):
        raise PipelineError("missing_artifact", f"no deterministic calibration at {calib}; run the 'calibrate' stage")
    with open(p) as fh:
        d = json.load(fh)
    if "P1" not in d:
        raise PipelineError("validation", f"{p} does not hold a deterministic calibration")
    return HeatSourceCoefficients.from_mm(d["P1"], d["P2"], d["P3"]), p


def _plan(case: str | None, plan_file: str | None, options: dict | None = None):
    from .scanpath import afr_preset, plan_from_dict

    if plan_file:
        if not os.path.exists(plan_file):
            raise PipelineError("missing_artifact", f"plan file not found: {plan_file}")
        try:
            with open(plan_file) as fh:
                return plan_from_dict(json.load(fh)), plan_file
        except (KeyError, ValueError, TypeError) as exc:
            raise PipelineError("validation", f"{plan_file}: invalid scan plan ({exc})")
    if not case:
        raise PipelineError("config", "simulate needs --case or --plan")
    try:
        return afr_preset(case, **(options or {})), None
    except TypeError as exc:
        raise PipelineError("config", f"plan_options: {exc}")
    except KeyError as exc:
        raise PipelineError("config", str(exc.args[0] if exc.args else exc))


def cmd_simulate(args, cfg: PipelineConfig) -> dict:
    from .calibrate import parameter_series
    from .meltpool import NoMeltPoolError, measure_width_depth
    from .solver import SolverConfig, plan_steps, run, save_result
    from .stats import ChainConfig

    started = _now()
    out = args.out or cfg.out
    plan, plan_file = _plan(args.case, args.plan, cfg.plan_options)
    os.makedirs(out, exist_ok=True)
    props = _props(cfg)
    single = plan.n_layers == 1 and sum(s.laser_on for s in plan.segments) == 1
    scfg = _solver_config(cfg, cell=args.cell, fidelity=args.fidelity)
    if "rhf_coupling" not in cfg.solver:
        scfg = scfg.replace(rhf_coupling=not single)
    calib = _calibration_dir(args.calibration or cfg.calibration)
    inputs = {"plan": plan_file} if plan_file else {}
    extra = {"case": args.case, "mode": args.mode, "cell": scfg.cell, "fidelity": scfg.fidelity}
    if args.mode == "stochastic":
        if calib is None:
            raise PipelineError("missing_artifact",
                                "stochastic mode needs a calibration artifact (--calibration); run the 'calibrate' stage")
        seed = _need_seed(cfg, "simulate")
        sc, sc_path = _load_stochastic(calib)
        _, n_on = plan_steps(plan, scfg, props)
        try:
            chain = ChainConfig(**{**cfg.chain, "seed": stage_seed(seed, "simulate", args.index)})
        except (TypeError, ValueError) as exc:
            raise PipelineError("config", f"chain: {exc}")
        source = parameter_series(sc.dist, n_on, chain)
        inputs["calibration"] = sc_path if sc_path and os.path.exists(sc_path) else None
        extra["chain"] = chain.to_dict()
    else:
        source, det_path = _deterministic_coeffs(cfg, calib)
        if det_path:
            inputs["calibration"] = det_path
        extra["heat_source"] = source.to_dict()
    res = run(plan, source, scfg, props)
    result_path = os.path.join(out, "result.stc")
    save_result(result_path, res, {"mode": args.mode, "case": args.case})
    outputs = [result_path]
    log_path = os.path.join(out, "log.csv")
    res.write_log(log_path)
    outputs.append(log_path)
    summary = {"energy_J": res.energy, "steps": int(res.state.step), "dt_s": res.wall["dt"],
               "grid": list(res.grid.shape), "peak_T_K": float(res.state.T_peak.max())}
    if single:
        try:
            m = measure_width_depth(res)
            track = os.path.join(out, "track.csv")
            m.write_csv(track)
            outputs.append(track)
            summary["track"] = m.summary()
        except NoMeltPoolError:
            summary["track"] = None
    outputs.append(_write_json(os.path.join(out, "summary.json"), summary))
    write_manifest(out, "simulate", cfg, inputs, outputs, started, extra)
    return summary


# ---------------------------------------------------------------------------
# surrogate
# ---------------------------------------------------------------------------

def cmd_surrogate(args, cfg: PipelineConfig) -> dict:
    from .surrogate import (IncompleteDatabaseError, ParameterGrid, build_database, cross_validate, default_grid,
                            hopgd_fit)

    started = _now()
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    try:
        grid = default_grid(args.nodes) if args.nodes else ParameterGrid.from_dict(cfg.grid)
    except (KeyError, ValueError, TypeError) as exc:
        raise PipelineError("config", f"grid: {exc}")
    scfg = _solver_config(cfg, cell=args.cell)
    if "rhf_coupling" not in cfg.solver:
        scfg = scfg.replace(rhf_coupling=False)
    sopts = {"tol": 1e-3, "max_rank": 12, "holdout_fraction": 0.2, "retries": 1, **cfg.surrogate}
    db_path = os.path.join(out, "database.stc")
    props = _props(cfg)
    db = None
    for attempt in range(int(sopts["retries"]) + 1):
        db = build_database(grid, scfg, props=props if cfg.material else None, checkpoint=db_path,
                            workers=_workers(args.workers), strict=False)
        if db.complete:
            break
    if not db.complete:
        raise PipelineError("incomplete", f"database incomplete after retries; failed nodes: {db.missing()}")
    model = hopgd_fit(db, tol=float(sopts["tol"]), max_rank=int(sopts["max_rank"]))
    model_path = os.path.join(out, "model.stc")
    model.save(model_path)
    cv = cross_validate(model, db, float(sopts["holdout_fraction"]), seed=int(cfg.seed or 0))
    report = {"rank": model.rank, "residual": {k: model.residual_history(k)[-1] for k in model.channels},
              "tol": model.tol, "cross_validation": cv,
              "flags": {k: c.flags for k, c in model.channels.items()}}
    cv_path = _write_json(os.path.join(out, "cross_validation.json"), report)
    write_manifest(out, "surrogate", cfg, {}, [db_path, model_path, cv_path], started,
                   {"nodes": list(grid.shape), "cell": scfg.cell})
    return report


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def _model_path(path: str | None) -> str:
    if path is None or path == "bundled":
        p = _bundled("model.stc")
    else:
        p = os.path.join(path, "model.stc") if os.path.isdir(path) else path
    if not os.path.exists(p):
        raise PipelineError("missing_artifact", f"surrogate model not found at {path}; run the 'surrogate' stage")
    return p


def cmd_calibrate(args, cfg: PipelineConfig) -> dict:
    from .calibrate import (CalibrationError, DatasetError, calibrate_deterministic, calibrate_stochastic,
                            load_dataset, propagate, sample_experiment)
    from .stats import binned_kde, kde, silverman_bandwidth
    from .surrogate import OutOfBoxError, SeparatedModel

    started = _now()
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    seed = _need_seed(cfg, "calibrate")
    model_path = _model_path(args.surrogate)
    model = SeparatedModel.load(model_path)
    ds_path = args.dataset or (None if cfg.dataset in (None, "bundled") else cfg.dataset)
    if ds_path is not None and not os.path.exists(ds_path):
        raise PipelineError("missing_artifact", f"dataset not found: {ds_path}")
    try:
        data = load_dataset(ds_path)
        data.require(cfg.cases)
        data = data.subset(cfg.cases)
    except DatasetError as exc:
        raise PipelineError("validation", str(exc))
    try:
        det = calibrate_deterministic(model, data, cfg.calibration_bounds, seed=stage_seed(seed, "calibrate", 0))
        sto = calibrate_stochastic(model, data, init=det, bounds=cfg.calibration_bounds,
                                   seed=stage_seed(seed, "calibrate", 1),
                                   **({"n_starts": int(cfg.surrogate["calibration_starts"])}
                                      if "calibration_starts" in cfg.surrogate else {}))
    except (CalibrationError, OutOfBoxError) as exc:
        raise PipelineError("numerical", str(exc))
    outputs = [_write_json(os.path.join(out, "deterministic.json"), det.to_dict())]
    sto_path = os.path.join(out, "stochastic.json")
    sto.save(sto_path)
    outputs.append(sto_path)
    kld_path = os.path.join(out, "kld.csv")
    with open(kld_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "kld_width_nats", "kld_depth_nats"])
        for c in sorted(sto.per_case):
            w.writerow([c, repr(sto.per_case[c]["width"]), repr(sto.per_case[c]["depth"])])
        w.writerow(["total", repr(sto.objective), ""])
    outputs.append(kld_path)
    for c in sorted(data.ids):
        we, de = sample_experiment(data, c)
        ws, dsim = propagate(model, sto.dist, data[c], sto.n_samples, sto.seed)
        cols = {}
        grids = {}
        for qn, e_s, s_s in (("width", we, ws), ("depth", de, dsim)):
            p = kde(e_s)
            h = silverman_bandwidth(s_s)
            lo = min(p.support[0], s_s.min() - 5 * h)
            hi = max(p.support[1], s_s.max() + 5 * h)
            g = np.linspace(lo, hi, 512)
            grids[qn] = g
            cols[qn] = (p(g), binned_kde(s_s, g, h)(g))
        path = os.path.join(out, f"overlay_{c}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "x_um", "experiment_per_um", "simulation_per_um"])
            for qn in ("width", "depth"):
                pe, ps = cols[qn]
                for x, a, b in zip(grids[qn], pe, ps):
                    w.writerow([qn, repr(float(x)), repr(float(a)), repr(float(b))])
        outputs.append(path)
    write_manifest(out, "calibrate", cfg, {"model": model_path, "dataset": data.source}, outputs, started)
    return {"deterministic": det.to_dict(), "stochastic": sto.to_dict()}


# ---------------------------------------------------------------------------
# measure
# ---------------------------------------------------------------------------

def _result_path(path: str | None) -> str:
    if not path:
        raise PipelineError("config", "measure needs --result")
    p = os.path.join(path, "result.stc") if os.path.isdir(path) else path
    if not os.path.exists(p):
        raise PipelineError("missing_artifact", f"result artifact not found: {path}; run the 'simulate' stage")
    return p


def cmd_measure(args, cfg: PipelineConfig) -> dict:
    from . import meltpool
    from .solver import load_result

    started = _now()
    out = args.out or cfg.out
    os.makedirs(out, exist_ok=True)
    rpath = _result_path(args.result)
    try:
        res = load_result(rpath)
    except ValueError as exc:
        raise PipelineError("validation", str(exc))
    what = args.what
    plan = res.plan
    outputs = []
    summary: dict[str, Any] = {"what": what}
    try:
        if what == "track":
            m = meltpool.measure_width_depth(res, int(cfg.measure.get("width_stations", 50)),
                                             int(cfg.measure.get("depth_stations", 20)))
            p = os.path.join(out, "track.csv")
            m.write_csv(p)
            outputs.append(p)
            summary.update(m.summary())
        elif what == "zones":
            if plan.n_layers < 2:
                raise PipelineError("validation", "zone areas need a multi-layer result")
            p = os.path.join(out, "zones.csv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["zone", "station_mm", "area_um2", "height_um"])
                for z in (1, 2, 3):
                    za = meltpool.cross_section_area(res, z)
                    for x, a, h in zip(za.stations, za.area_um2, za.height_um):
                        w.writerow([z, repr(float(x * 1e3)), repr(float(a)), repr(float(h))])
                    summary[f"zone{z}_area_um2"] = {"mean": za.mean, "std": za.std}
            outputs.append(p)
        elif what == "roughness":
            if plan.n_layers < 2:
                raise PipelineError("validation", "wall roughness needs a multi-layer result")
            ra, mean, std = meltpool.wall_roughness(res, int(cfg.measure.get("regions", 10)))
            p = os.path.join(out, "roughness.csv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["region", "Ra_um"])
                for i, v in enumerate(ra):
                    w.writerow([i + 1, repr(float(v))])
                w.writerow(["mean", repr(mean)])
                w.writerow(["std", repr(std)])
            outputs.append(p)
            summary.update({"Ra_mean_um": mean, "Ra_std_um": std})
        elif what == "porosity":
            if plan.n_layers < 2 and sum(s.laser_on for s in plan.segments) < 2:
                raise PipelineError("validation", "porosity needs a multi-track or multi-layer result")
            (x0, y0, _), (x1, y1, _) = plan.bounds
            g = res.grid
            if g.symmetric_y:
                y0 = g.origin[1]
            box = cfg.measure.get("box") or [(x0, x1), (y0, y1), (g.substrate_top - plan.layer_thickness,
                                                                    res.layer_tops[-1])]
            rep = meltpool.lof_porosity(res, box)
            p = os.path.join(out, "porosity.csv")
            rep.write_csv(p)
            outputs.append(p)
            summary.update({"fraction": rep.fraction, "pore_count": rep.pore_count})
        elif what == "ved":
            seg = next(s for s in plan.segments if s.laser_on)
            sigma = float(cfg.measure.get("beam_diameter_mm", 0.1))
            v = meltpool.ved(seg.power, seg.speed * 1e3, sigma, plan.layer_thickness * 1e3)
            p = os.path.join(out, "ved.csv")
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["P_W", "V_mm_s", "beam_diameter_mm", "layer_thickness_mm", "VED_J_mm3"])
                w.writerow([seg.power, repr(seg.speed * 1e3), sigma, repr(plan.layer_thickness * 1e3), repr(v)])
            outputs.append(p)
            summary["VED_J_mm3"] = v
        else:
            raise PipelineError("config", f"unknown measurement: {what}")
    except meltpool.NoMeltPoolError as exc:
        raise PipelineError("numerical", str(exc))
    except ValueError as exc:
        raise PipelineError("validation", str(exc))
    outputs.append(_write_json(os.path.join(out, f"{what}_summary.json"), summary))
    write_manifest(out, "measure", cfg, {"result": rpath}, outputs, started, {"what": what})
    return summary


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args, cfg: PipelineConfig) -> dict:
    root = args.out or cfg.out
    if not os.path.isdir(root):
        raise PipelineError("missing_artifact", f"no output directory {root}")
    stages = []
    for dirpath, _, files in sorted(os.walk(root)):
        if "manifest.json" not in files:
            continue
        with open(os.path.join(dirpath, "manifest.json")) as fh:
            man = json.load(fh)
        entry = {"dir": os.path.relpath(dirpath, root), "stage": man["stage"], "config_hash": man["config_hash"],
                 "outputs": sorted(man["outputs"])}
        for name in ("summary.json", "cross_validation.json", "kld.csv") + tuple(
                f for f in files if f.endswith("_summary.json")):
            p = os.path.join(dirpath, name)
            if os.path.exists(p) and name.endswith(".json"):
                with open(p) as fh:
                    entry[name] = json.load(fh)
        stages.append(entry)
    if not stages:
        raise PipelineError("missing_artifact", f"no stage manifests under {root}")
    report = {"tool_version": __version__, "stages": stages}
    _write_json(os.path.join(root, "report.json"), report)
    lines = ["# stocham report", ""]
    for s in stages:
        lines.append(f"- {s['stage']} in `{s['dir']}`: {', '.join(s['outputs'])}")
    with open(os.path.join(root, "report.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stocham", description="Stochastic LPBF melt-pool pipeline")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--workers", type=int, help="worker processes (default $STOCHAM_WORKERS or 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--case", help="preset case id (A1-A11, B1-B2, C1-C6)")

    p = sub.add_parser("simulate", help="run the solver on a case or plan")
    common(p)
    p.add_argument("--plan", help="JSON scan plan file")
    p.add_argument("--mode", choices=("deterministic", "stochastic"), default="deterministic")
    p.add_argument("--calibration", help="calibration directory or file, or 'bundled'")
    p.add_argument("--cell", type=float, help="cell size in m")
    p.add_argument("--fidelity", choices=("thermal_only", "thermal_fluid"))
    p.add_argument("--index", type=int, default=0, help="run index within an ensemble (seed split)")

    p = sub.add_parser("surrogate", help="build the snapshot database and fit the HOPGD model")
    common(p)
    p.add_argument("--nodes", type=int, help="nodes per axis (overrides the config grid)")
    p.add_argument("--cell", type=float, help="cell size in m")

    p = sub.add_parser("calibrate", help="deterministic then stochastic calibration")
    common(p)
    p.add_argument("--surrogate", help="model file or surrogate output directory, or 'bundled'")
    p.add_argument("--dataset", help="experiment dataset CSV (default: bundled)")

    p = sub.add_parser("measure", help="measure a simulation result")
    common(p)
    p.add_argument("--result", help="result file or simulate output directory")
    p.add_argument("--what", required=True, choices=("track", "zones", "roughness", "porosity", "ved"))

    p = sub.add_parser("report", help="summarize stage outputs under --out")
    common(p)
    return ap


COMMANDS = {"simulate": cmd_simulate, "surrogate": cmd_surrogate, "calibrate": cmd_calibrate,
            "measure": cmd_measure, "report": cmd_report}


def _category(exc: Exception) -> str:
    from .solver import ProjectionError, SeriesExhaustedError, StabilityError

    if isinstance(exc, (StabilityError, ProjectionError, FloatingPointError)):
        return "numerical"
    if isinstance(exc, SeriesExhaustedError):
        return "numerical"
    if isinstance(exc, (ValueError, KeyError)):
        return "validation"
    if isinstance(exc, FileNotFoundError):
        return "missing_artifact"
    return "internal"


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        result = COMMANDS[args.command](args, cfg)
    except PipelineError as exc:
        print(json.dumps({"error": {"category": exc.category, "message": str(exc)}}), file=sys.stderr)
        return EXIT_CODES[exc.category]
    except Exception as exc:  # categorized, never a bare traceback
        cat = _category(exc)
        print(json.dumps({"error": {"category": cat, "message": f"{type(exc).__name__}: {exc}"}}), file=sys.stderr)
        return EXIT_CODES[cat]
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
