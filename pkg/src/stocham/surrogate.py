"""HOPGD separated-variable surrogate of melt-pool width and depth.

The surrogate maps the linear energy density ``e`` (J/mm) and the heat
source coefficients ``P1, P2, P3`` (mm units, see
:mod:`stocham.heatsource`) to track width and depth (um). A dense tensor
of solver snapshots is approximated by a sum of products of 1D mode
functions, each mode found by greedy rank-one enrichment followed by a
joint refit of all modes. Between nodes the modes are interpolated
linearly, so every evaluation needs only 1D interpolation.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import container
from .heatsource import HeatSourceCoefficients

log = logging.getLogger(__name__)

__all__ = [
    "AXES",
    "ParameterGrid",
    "SnapshotDatabase",
    "SeparatedModel",
    "IncompleteDatabaseError",
    "OutOfBoxError",
    "default_grid",
    "node_plan",
    "build_database",
    "hopgd_fit",
    "fit_tensor",
    "evaluate",
    "cross_validate",
]

AXES = ("e", "P1", "P2", "P3")
OUTPUTS = ("W", "D")

# coefficient bounds (mm units) from a coarse scan at 10 um over the e range:
# d stays below 300 um, r_b inside [20, 120] um, eta reaches its cap of 1
DEFAULT_BOUNDS = {
    "e": (0.15, 0.33),
    "P1": (0.25, 0.85),
    "P2": (1.5, 4.5),
    "P3": (0.14, 0.36),
}
DEFAULT_POWER = 300.0


class IncompleteDatabaseError(RuntimeError):
    def __init__(self, failed: Sequence[tuple[int, ...]], message: str = ""):
        self.failed = [tuple(int(v) for v in f) for f in failed]
        super().__init__(message or f"database incomplete; failed nodes: {self.failed}")


class OutOfBoxError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterGrid:
    e: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    P3: np.ndarray

    def __post_init__(self) -> None:
        for name in AXES:
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 1 or a.size < 2:
                raise ValueError(f"axis {name} needs at least 2 nodes")
            if not np.all(np.diff(a) > 0):
                raise ValueError(f"axis {name} must be strictly increasing")
            object.__setattr__(self, name, a)

    @property
    def axes(self) -> tuple[np.ndarray, ...]:
        return (self.e, self.P1, self.P2, self.P3)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def node(self, idx: Sequence[int]) -> tuple[float, float, float, float]:
        return tuple(float(a[i]) for a, i in zip(self.axes, idx))

    def bounds(self) -> dict[str, tuple[float, float]]:
        return {n: (float(a[0]), float(a[-1])) for n, a in zip(AXES, self.axes)}

    def to_dict(self) -> dict[str, list[float]]:
        return {n: [float(v) for v in a] for n, a in zip(AXES, self.axes)}

    @classmethod
    def from_dict(cls, d) -> "ParameterGrid":
        if isinstance(d, dict) and "nodes" in d:
            n = int(d["nodes"])
            b = {**DEFAULT_BOUNDS, **{k: tuple(v) for k, v in d.get("bounds", {}).items()}}
            return default_grid(n, b)
        return cls(*(np.asarray(d[n], dtype=float) for n in AXES))


def default_grid(n: int = 6, bounds: dict[str, tuple[float, float]] | None = None) -> ParameterGrid:
    b = {**DEFAULT_BOUNDS, **(bounds or {})}
    return ParameterGrid(*(np.linspace(*b[name], n) for name in AXES))


@dataclass
class SnapshotDatabase:
    grid: ParameterGrid
    W: np.ndarray
    D: np.ndarray
    provenance: dict = field(default_factory=dict)
    done: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.done is None:
            self.done = np.ones(self.grid.shape, dtype=bool)

    @property
    def complete(self) -> bool:
        return bool(self.done.all())

    def missing(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in i) for i in np.argwhere(~self.done)]

    def output(self, name: str) -> np.ndarray:
        return {"W": self.W, "D": self.D}[name]

    def save(self, path) -> str:
        meta = {"kind": "snapshot_database", "grid": self.grid.to_dict(), "provenance": self.provenance}
        return container.write(path, {"W": self.W, "D": self.D, "done": self.done.astype(np.uint8)}, meta)

    @classmethod
    def load(cls, path) -> "SnapshotDatabase":
        arrays, meta = container.read(path)
        if meta.get("kind") != "snapshot_database":
            raise ValueError(f"{path} is not a snapshot database")
        return cls(ParameterGrid.from_dict(meta["grid"]), arrays["W"], arrays["D"],
                   meta.get("provenance", {}), arrays["done"].astype(bool))


# ---------------------------------------------------------------------------
# database build
# ---------------------------------------------------------------------------

def node_plan(e: float, power: float = DEFAULT_POWER, track_length: float = 1e-3):
    """Single-track plan realizing ``e`` (J/mm); an exact Table 1 match keeps its P, V."""
    from .scanpath import SINGLE_TRACK_CASES, single_track_conditions, single_track_plan

    for case in SINGLE_TRACK_CASES:
        P, V = single_track_conditions(case)
        if abs(P / (V * 1e3) - e) < 1e-12:
            return single_track_plan(P, V, track_length=track_length)
    return single_track_plan(power, power / (e * 1e3), track_length=track_length)


def _run_node(args):
    from .material import MaterialProperties
    from .meltpool import NoMeltPoolError, measure_width_depth
    from .solver import SolverConfig, run

    idx, (e, P1, P2, P3), cfg, props, power, track_length = args
    try:
        plan = node_plan(e, power, track_length)
        res = run(plan, HeatSourceCoefficients.from_mm(P1, P2, P3), SolverConfig.from_mapping(cfg),
                  props if props is not None else MaterialProperties())
        try:
            m = measure_width_depth(res)
            return idx, m.width_mean, m.depth_mean, None
        except NoMeltPoolError:
            return idx, 0.0, 0.0, None
    except Exception as exc:  # recorded, the database is then incomplete
        return idx, np.nan, np.nan, f"{type(exc).__name__}: {exc}"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def default_workers() -> int:
    return int(os.environ.get("STOCHAM_WORKERS", "1"))


def build_database(grid: ParameterGrid, solver_config=None, plan_family: Callable | None = None,
                   props=None, checkpoint: str | os.PathLike | None = None, workers: int | None = None,
                   power: float = DEFAULT_POWER, track_length: float = 1e-3, checkpoint_every: int = 20,
                   runner: Callable | None = None, strict: bool = True) -> SnapshotDatabase:
    """One deterministic single-track run per grid node.

    With ``checkpoint`` the partial database is saved every
    ``checkpoint_every`` nodes and an existing checkpoint with the same
    provenance is resumed. ``runner(e, P1, P2, P3) -> (W, D)`` replaces the
    solver, e.g. for tests. Failed nodes raise
    :class:`IncompleteDatabaseError` unless ``strict`` is false.
    """
    from .solver import SolverConfig

    cfg = solver_config if isinstance(solver_config, SolverConfig) else SolverConfig.from_mapping(solver_config or {"rhf_coupling": False})
    cfg_d = cfg.to_dict()
    prov = {"solver_config": cfg_d, "power": power, "track_length": track_length,
            "props": props.to_dict() if props is not None else "default",
            "runner": getattr(runner, "__name__", None) if runner else "solver"}
    prov["hash"] = config_hash({**prov, "grid": grid.to_dict()})
    W = np.full(grid.shape, np.nan)
    D = np.full(grid.shape, np.nan)
    done = np.zeros(grid.shape, dtype=bool)
    if checkpoint is not None and os.path.exists(checkpoint):
        old = SnapshotDatabase.load(checkpoint)
        if old.provenance.get("hash") == prov["hash"]:
            W, D, done = old.W.copy(), old.D.copy(), old.done.copy()
            log.info("resuming database: %d of %d nodes done", int(done.sum()), grid.size)
    todo = [idx for idx in itertools.product(*(range(n) for n in grid.shape)) if not done[idx]]
    failed: list[tuple[int, ...]] = []
    errors: dict[str, str] = {}

    def record(idx, w, d, err):
        if err is not None:
            failed.append(idx)
            errors[str(idx)] = err
            return
        W[idx], D[idx] = w, d
        done[idx] = True

    def save():
        if checkpoint is not None:
            SnapshotDatabase(grid, W, D, {**prov, "errors": errors}, done).save(checkpoint)

    if runner is not None:
        for n, idx in enumerate(todo):
            try:
                w, d = runner(*grid.node(idx))
                record(idx, float(w), float(d), None)
            except Exception as exc:
                record(idx, np.nan, np.nan, f"{type(exc).__name__}: {exc}")
    else:
        jobs = [(idx, grid.node(idx), cfg_d, props, power, track_length) for idx in todo]
        workers = workers or default_workers()
        if workers <= 1:
            results = map(_run_node, jobs)
        else:
            pool = ProcessPoolExecutor(workers)
            results = pool.map(_run_node, jobs, chunksize=1)
        for n, out in enumerate(results, 1):
            record(*out)
            if n % checkpoint_every == 0:
                save()
                log.info("database: %d/%d", n, len(jobs))
        if workers > 1:
            pool.shutdown()
    save()
    db = SnapshotDatabase(grid, W, D, {**prov, "errors": errors}, done)
    if strict and not db.complete:
        raise IncompleteDatabaseError(db.missing())
    return db


# ---------------------------------------------------------------------------
# HOPGD fit
# ---------------------------------------------------------------------------

def _khatri_rao(mats: list[np.ndarray]) -> np.ndarray:
    """Row-wise products over all index combinations, last matrix fastest."""
    Z = mats[0]
    for M in mats[1:]:
        Z = (Z[:, None, :] * M[None, :, :]).reshape(-1, Z.shape[1])
    return Z


def _als_sweep(F: np.ndarray, Wt: np.ndarray | None, factors: list[np.ndarray]) -> None:
    """One round-robin least-squares update of every factor matrix, in place.

    ``factors[a]`` has shape (n_a, rank). With weights ``Wt`` (0 for
    missing entries) every row is solved from its own observed entries.
    """
    nd = F.ndim
    k = factors[0].shape[1]
    for a in range(nd):
        Z = _khatri_rao([factors[b] for b in range(nd) if b != a])
        Fa = np.moveaxis(F, a, 0).reshape(F.shape[a], -1)
        if Wt is None:
            G = np.ones((k, k))
            for b in range(nd):
                if b != a:
                    G *= factors[b].T @ factors[b]
            rhs = Fa @ Z
            ridge = 1e-13 * max(np.trace(G), 1e-300) / k
            factors[a] = np.linalg.solve(G + ridge * np.eye(k), rhs.T).T
        else:
            Wa = np.moveaxis(Wt, a, 0).reshape(F.shape[a], -1)
            G = np.einsum("im,mr,ms->irs", Wa, Z, Z)
            rhs = (Wa * Fa) @ Z
            tr = np.maximum(np.trace(G, axis1=1, axis2=2), 1e-300)
            G = G + (1e-13 * tr / k)[:, None, None] * np.eye(k)[None]
            factors[a] = np.linalg.solve(G, rhs[:, :, None])[:, :, 0]
        if a < nd - 1:
            # move the scale onto the last axis to avoid drift
            nrm = np.linalg.norm(factors[a], axis=0)
            nrm[nrm == 0] = 1.0
            factors[a] = factors[a] / nrm
            factors[-1] = factors[-1] * nrm


def _cp_tensor(factors: list[np.ndarray], shape) -> np.ndarray:
    return (_khatri_rao(factors[:-1]) @ factors[-1].T).reshape(shape) if factors[0].shape[1] else np.zeros(shape)


def _als(F, Wt, factors, tol, max_sweeps, target=0.0):
    """ALS sweeps with an extrapolation line search against slow convergence."""
    prev = _cp_tensor(factors, F.shape)
    res = _resid(F, Wt, factors)
    for sweep in range(1, max_sweeps + 1):
        old = [f.copy() for f in factors]
        _als_sweep(F, Wt, factors)
        res_new = _resid(F, Wt, factors)
        if sweep > 2:
            step = sweep ** (1.0 / 3.0)
            jump = [o + step * (f - o) for o, f in zip(old, factors)]
            res_jump = _resid(F, Wt, jump)
            if res_jump < res_new:
                factors[:] = jump
                res_new = res_jump
        res = res_new
        if res <= target:
            return True, sweep
        cur = _cp_tensor(factors, F.shape)
        if np.linalg.norm(cur - prev) <= tol * max(np.linalg.norm(cur), 1e-300):
            return True, sweep
        prev = cur
    return False, max_sweeps


def _hosvd_start(F: np.ndarray, r: int) -> list[np.ndarray] | None:
    out = []
    for ax in range(F.ndim):
        M = np.moveaxis(F, ax, 0).reshape(F.shape[ax], -1)
        u, _, _ = np.linalg.svd(M, full_matrices=False)
        if u.shape[1] < r:
            # axis shorter than the rank: pad with repeated columns
            u = np.hstack([u] + [u[:, :1]] * (r - u.shape[1]))
        out.append(u[:, :r].copy())
    # scale from a least-squares fit of the last factor
    _als_sweep(F, None, out)
    return out if all(np.all(np.isfinite(f)) for f in out) else None


def _resid(F, Wt, factors) -> float:
    R = F - _cp_tensor(factors, F.shape)
    if Wt is not None:
        R = R * np.sqrt(Wt)
    return float(np.linalg.norm(R))


@dataclass
class _Channel:
    amplitudes: np.ndarray  # (rank,)
    modes: list[np.ndarray]  # per axis, (rank, n_axis)
    residuals: list[float]  # relative residual after each enrichment, index 0 = rank 0
    flags: list[str]

    @property
    def rank(self) -> int:
        return int(self.amplitudes.size)

    def tensor(self) -> np.ndarray:
        shape = tuple(m.shape[1] for m in self.modes)
        if self.rank == 0:
            return np.zeros(shape)
        f = [m.T.copy() for m in self.modes]
        f[-1] = f[-1] * self.amplitudes[None, :]
        return _cp_tensor(f, shape)


def fit_tensor(F: np.ndarray, tol: float = 1e-3, max_rank: int = 12, inner_tol: float = 1e-8,
               max_sweeps: int = 200, joint_sweeps: int = 3000, mask: np.ndarray | None = None) -> _Channel:
    """Greedy rank-one enrichment; after each new mode all modes are refit jointly.

    ``mask`` marks the observed entries; the fit then ignores the others.
    """
    F = np.asarray(F, dtype=float)
    Wt = None if mask is None else np.asarray(mask, dtype=float)
    Fo = F if Wt is None else np.where(Wt > 0, F, 0.0)
    if not np.all(np.isfinite(Fo)):
        raise ValueError("tensor has non-finite entries")
    nd = F.ndim
    normF = float(np.linalg.norm(Fo))
    flags: list[str] = []
    if normF == 0:
        return _Channel(np.zeros(0), [np.zeros((0, n)) for n in F.shape], [0.0], flags)
    factors = [np.zeros((n, 0)) for n in F.shape]
    residuals = [1.0]
    while len(residuals) - 1 < max_rank and residuals[-1] > tol:
        r = len(residuals)
        R = Fo - _cp_tensor(factors, F.shape)
        if Wt is not None:
            R = R * Wt
        # rank-one start from the dominant singular vector of each unfolding
        one = []
        for ax in range(nd):
            M = np.moveaxis(R, ax, 0).reshape(F.shape[ax], -1)
            u, s, _ = np.linalg.svd(M, full_matrices=False)
            one.append(u[:, :1].copy())
        one[-1] *= max(float(s[0]) if s.size else 0.0, 1e-300) ** (1.0 / nd)
        ok, _ = _als(R, Wt, one, inner_tol, max_sweeps)
        if not ok:
            flags.append(f"mode {r}: rank-one iteration hit {max_sweeps} sweeps")
        trial = [np.hstack([f, o]) for f, o in zip(factors, one)]
        if r > 1:
            _als(Fo, Wt, trial, min(inner_tol, 1e-12), joint_sweeps, 0.1 * tol * normF)
            # second start from the leading singular vectors of every unfolding;
            # greedy starts can stall where an exact low-rank fit exists
            alt = _hosvd_start(Fo if Wt is None else Fo * Wt, r)
            if alt is not None:
                _als(Fo, Wt, alt, min(inner_tol, 1e-12), joint_sweeps, 0.1 * tol * normF)
                if _resid(Fo, Wt, alt) < _resid(Fo, Wt, trial):
                    trial = alt
        res = _resid(Fo, Wt, trial) / normF
        if not np.isfinite(res) or res >= residuals[-1]:
            flags.append(f"mode {r}: no residual decrease, enrichment stopped")
            break
        factors = trial
        residuals.append(res)
    rank = factors[0].shape[1]
    amps = np.ones(rank)
    modes = [f.T.copy() for f in factors]
    for j in range(rank):
        for ax in range(nd):
            n = np.linalg.norm(modes[ax][j])
            amps[j] *= n
            if n > 0:
                modes[ax][j] /= n
        # sign convention: entry of largest magnitude positive on the first three axes
        for ax in range(nd - 1):
            if modes[ax][j][np.argmax(np.abs(modes[ax][j]))] < 0:
                modes[ax][j] *= -1.0
                modes[-1][j] *= -1.0
    return _Channel(amps, modes, residuals, flags)


@dataclass
class SeparatedModel:
    grid: ParameterGrid
    channels: dict[str, _Channel]
    tol: float
    provenance: dict = field(default_factory=dict)

    @property
    def rank(self) -> dict[str, int]:
        return {k: c.rank for k, c in self.channels.items()}

    def residual_history(self, output: str = "W") -> list[float]:
        return list(self.channels[output].residuals)

    def reconstruct(self, output: str = "W") -> np.ndarray:
        return self.channels[output].tensor()

    def in_box(self, e, P1, P2, P3) -> np.ndarray:
        ok = np.ones(np.broadcast(np.asarray(e), np.asarray(P1), np.asarray(P2), np.asarray(P3)).shape, dtype=bool)
        for a, q in zip(self.grid.axes, (e, P1, P2, P3)):
            q = np.asarray(q, dtype=float)
            ok &= (q >= a[0] - 1e-12 * abs(a[0])) & (q <= a[-1] + 1e-12 * abs(a[-1]))
        return ok

    def evaluate(self, e, P1, P2, P3, output: str | None = None):
        """(W, D) in um, or one output; broadcast over array inputs."""
        qs = [np.asarray(q, dtype=float) for q in (e, P1, P2, P3)]
        if not np.all(self.in_box(*qs)):
            raise OutOfBoxError("query outside the surrogate box")
        shape = np.broadcast(*qs).shape
        qs = [np.broadcast_to(q, shape).ravel() for q in qs]
        outs = {}
        for name, ch in self.channels.items():
            val = np.zeros(qs[0].size)
            for r in range(ch.rank):
                term = np.full(qs[0].size, ch.amplitudes[r])
                for ax, q in enumerate(qs):
                    term *= np.interp(q, self.grid.axes[ax], ch.modes[ax][r])
                val += term
            outs[name] = val.reshape(shape) if shape else float(val[0])
        if output is not None:
            return outs[output]
        return outs["W"], outs["D"]

    def evaluate_cases(self, e_values, P1, P2, P3, output: str | None = None):
        """Outputs for every pair of energy density and coefficient sample.

        Returns arrays of shape (len(e_values), len(P1)); the coefficient
        modes are interpolated once and shared by all cases.
        """
        e_values = np.atleast_1d(np.asarray(e_values, dtype=float))
        qs = [np.atleast_1d(np.asarray(q, dtype=float)) for q in (P1, P2, P3)]
        if not (np.all(self.in_box(e_values, self.grid.P1[0], self.grid.P2[0], self.grid.P3[0]))
                and np.all(self.in_box(self.grid.e[0], *qs))):
            raise OutOfBoxError("query outside the surrogate box")
        outs = {}
        for name, ch in self.channels.items():
            if ch.rank == 0:
                outs[name] = np.zeros((e_values.size, qs[0].size))
                continue
            Fe = np.stack([np.interp(e_values, self.grid.e, ch.modes[0][r]) for r in range(ch.rank)], axis=1)
            G = np.ones((ch.rank, qs[0].size))
            for ax in range(1, 4):
                for r in range(ch.rank):
                    G[r] *= np.interp(qs[ax - 1], self.grid.axes[ax], ch.modes[ax][r])
            outs[name] = (Fe * ch.amplitudes[None, :]) @ G
        if output is not None:
            return outs[output]
        return outs["W"], outs["D"]

    def save(self, path) -> str:
        arrays = {}
        meta = {"kind": "separated_model", "grid": self.grid.to_dict(), "tol": self.tol,
                "provenance": self.provenance, "channels": {}}
        # sorted so that a loaded model writes the same bytes
        for name, ch in sorted(self.channels.items()):
            arrays[f"{name}/amplitudes"] = ch.amplitudes
            for ax, m in enumerate(ch.modes):
                arrays[f"{name}/mode_{AXES[ax]}"] = m
            arrays[f"{name}/residuals"] = np.asarray(ch.residuals, dtype=float)
            meta["channels"][name] = {"rank": ch.rank, "flags": ch.flags}
        for ax, name in enumerate(AXES):
            arrays[f"axis/{name}"] = self.grid.axes[ax]
        return container.write(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "SeparatedModel":
        arrays, meta = container.read(path)
        if meta.get("kind") != "separated_model":
            raise ValueError(f"{path} is not a separated model")
        grid = ParameterGrid(*(arrays[f"axis/{n}"] for n in AXES))
        channels = {}
        for name, info in meta["channels"].items():
            channels[name] = _Channel(arrays[f"{name}/amplitudes"],
                                      [arrays[f"{name}/mode_{a}"] for a in AXES],
                                      [float(v) for v in arrays[f"{name}/residuals"]], list(info["flags"]))
        return cls(grid, channels, float(meta["tol"]), meta.get("provenance", {}))


def hopgd_fit(database: SnapshotDatabase, tol: float = 1e-3, max_rank: int = 12, **kw) -> SeparatedModel:
    if not database.complete:
        raise IncompleteDatabaseError(database.missing())
    channels = {name: fit_tensor(database.output(name), tol, max_rank, **kw) for name in OUTPUTS}
    return SeparatedModel(database.grid, channels, tol, {"database": database.provenance.get("hash")})


def evaluate(model: SeparatedModel, e, P1, P2, P3):
    return model.evaluate(e, P1, P2, P3)


def cross_validate(model: SeparatedModel | None, database: SnapshotDatabase, holdout_fraction: float = 0.2,
                   seed: int = 0, max_rank: int | None = None) -> dict:
    """Refit without a random node subset; relative errors on the held-out nodes."""
    if not 0 < holdout_fraction <= 0.5:
        raise ValueError("holdout_fraction must lie in (0, 0.5]")
    shape = database.grid.shape
    rng = np.random.default_rng(seed)
    n = int(np.prod(shape))
    k = max(1, int(round(holdout_fraction * n)))
    held = np.zeros(n, dtype=bool)
    held[rng.choice(n, size=k, replace=False)] = True
    held = held.reshape(shape)
    keep = ~held
    for ax in range(len(shape)):
        other = tuple(b for b in range(len(shape)) if b != ax)
        if np.count_nonzero(keep.any(axis=other)) < 2:
            raise ValueError("too few retained nodes along an axis")
    tol = model.tol if model is not None else 1e-3
    rank = max_rank or (max(model.rank.values()) if model is not None else 12)
    stats = {"holdout_fraction": holdout_fraction, "seed": seed, "n_held": int(k)}
    for name in OUTPUTS:
        F = database.output(name)
        R = fit_tensor(F, tol, max(rank, 1), mask=keep).tensor()
        ref = np.abs(F[held])
        err = np.abs(R[held] - F[held]) / np.where(ref > 0, ref, 1.0)
        stats[name] = {"median_rel_error": float(np.median(err)), "max_rel_error": float(np.max(err))}
    return stats
