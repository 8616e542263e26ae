"""Deterministic and stochastic calibration of the heat source coefficients.

Coefficients are in the surrogate's mm units throughout. The deterministic
problem fits (P1, P2, P3) to the mean width and depth of every case; the
stochastic problem fits a trivariate normal over the coefficients so that
propagated width and depth densities match the experimental ones in KL
divergence.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from scipy.optimize import minimize
from scipy.stats import qmc

from .stats import TrivariateNormal, binned_kde, kde, kld, silverman_bandwidth
from .surrogate import OutOfBoxError, SeparatedModel

__all__ = [
    "Summary",
    "CaseData",
    "ExperimentDataset",
    "DatasetError",
    "DeterministicCalibration",
    "StochasticCalibration",
    "CalibrationError",
    "load_dataset",
    "sample_experiment",
    "calibrate_deterministic",
    "propagate",
    "calibrate_stochastic",
    "stochastic_objective",
    "parameter_series",
]

CASES = tuple(f"A{i}" for i in range(1, 12))
QUANTITIES = ("width", "depth")


class DatasetError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int


@dataclass
class CaseData:
    case: str
    P: float  # W
    V: float  # mm/s
    width: np.ndarray | Summary
    depth: np.ndarray | Summary
    extra: dict = field(default_factory=dict)

    @property
    def e(self) -> float:
        """Linear energy density in J/mm."""
        return self.P / self.V

    def quantity(self, name: str):
        return {"width": self.width, "depth": self.depth}[name]

    def mean(self, name: str) -> float:
        q = self.quantity(name)
        return q.mean if isinstance(q, Summary) else float(np.mean(q))


@dataclass
class ExperimentDataset:
    cases: dict[str, CaseData]
    source: str = ""

    def __getitem__(self, case: str) -> CaseData:
        if case not in self.cases:
            raise KeyError(f"case {case} not in dataset (have {sorted(self.cases)})")
        return self.cases[case]

    def __iter__(self):
        return iter(self.cases.values())

    def __len__(self) -> int:
        return len(self.cases)

    @property
    def ids(self) -> list[str]:
        return list(self.cases)

    def require(self, ids: Iterable[str] = CASES) -> None:
        missing = [c for c in ids if c not in self.cases]
        if missing:
            raise DatasetError(f"dataset is missing cases: {', '.join(missing)}")

    def subset(self, ids: Sequence[str]) -> "ExperimentDataset":
        self.require(ids)
        return ExperimentDataset({c: self.cases[c] for c in ids}, self.source)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "P_W", "V_mm_s", "quantity", "mean_um", "std_um", "n", "values_um"])
            for c in self:
                for qn in QUANTITIES:
                    q = c.quantity(qn)
                    if isinstance(q, Summary):
                        w.writerow([c.case, c.P, c.V, qn, q.mean, q.std, q.n, ""])
                    else:
                        w.writerow([c.case, c.P, c.V, qn, "", "", len(q), " ".join(repr(float(v)) for v in q)])


def _bundled_path() -> str:
    return str(resources.files("stocham") / "data" / "afrl_single_track.csv")


def load_dataset(path: str | os.PathLike | None = None, require_all: bool = False) -> ExperimentDataset:
    """Read a dataset CSV; the bundled single-track statistics by default.

    Each row gives one quantity of one case, either as a (mean, std, n)
    summary or as space-separated raw values.
    """
    path = str(path) if path is not None else _bundled_path()
    raw: dict[str, dict] = {}
    errors = []
    with open(path, newline="") as fh:
        lines = [(n, ln) for n, ln in enumerate(fh, 1) if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.DictReader([ln for _, ln in lines])
    need = {"case", "P_W", "V_mm_s", "quantity"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise DatasetError(f"{path}: header must contain {sorted(need)}")
    for (lineno, _), row in zip(lines[1:], reader):
        try:
            case = row["case"].strip()
            P, V = float(row["P_W"]), float(row["V_mm_s"])
            if not (P > 0 and V > 0):
                raise ValueError("P_W and V_mm_s must be positive")
            qn = row["quantity"].strip()
            vals = (row.get("values_um") or "").split()
            if vals:
                q = np.asarray([float(v) for v in vals])
            else:
                q = Summary(float(row["mean_um"]), float(row["std_um"]), int(row["n"]))
                if not (q.std >= 0 and q.n >= 1):
                    raise ValueError("std must be >= 0 and n >= 1")
        except (ValueError, KeyError, TypeError) as exc:
            errors.append(f"row {lineno}: {exc}")
            continue
        entry = raw.setdefault(case, {"P": P, "V": V, "q": {}})
        if (entry["P"], entry["V"]) != (P, V):
            errors.append(f"row {lineno}: process parameters differ from earlier rows of {case}")
        entry["q"][qn] = q
    for case, entry in raw.items():
        for qn in QUANTITIES:
            if qn not in entry["q"]:
                errors.append(f"case {case}: no {qn} row")
    if errors:
        raise DatasetError(f"{path}: " + "; ".join(errors))
    cases = {}
    for case, entry in raw.items():
        q = entry["q"]
        extra = {k: v for k, v in q.items() if k not in QUANTITIES}
        cases[case] = CaseData(case, entry["P"], entry["V"], q["width"], q["depth"], extra)
    ds = ExperimentDataset(cases, path)
    if require_all:
        ds.require()
    return ds


def _case_seed(case: str, quantity: str, seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, sum(ord(ch) * 31 ** i for i, ch in enumerate(case)), QUANTITIES.index(quantity)])


def sample_experiment(dataset: ExperimentDataset, case: str, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Width and depth samples; summaries become moment-matched Gaussian pseudo-samples."""
    c = dataset[case]
    out = []
    for qn in QUANTITIES:
        q = c.quantity(qn)
        if isinstance(q, Summary):
            if q.n < 2:
                raise DatasetError(f"{case} {qn}: a summary needs n >= 2 for a density estimate")
            z = np.random.default_rng(_case_seed(case, qn, seed)).standard_normal(q.n)
            z = (z - z.mean()) / z.std(ddof=1)
            out.append(q.mean + q.std * z)
        else:
            out.append(np.asarray(q, dtype=float))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# deterministic
# ---------------------------------------------------------------------------

@dataclass
class DeterministicCalibration:
    p: np.ndarray  # (P1, P2, P3), mm units
    objective: float
    starts: np.ndarray
    start_objectives: np.ndarray
    final_objectives: np.ndarray
    cases: list[str]

    def to_dict(self) -> dict:
        return {"P1": float(self.p[0]), "P2": float(self.p[1]), "P3": float(self.p[2]),
                "units": "mm", "objective_um2": self.objective, "cases": self.cases,
                "starts": self.starts.tolist(), "start_objectives": self.start_objectives.tolist(),
                "final_objectives": self.final_objectives.tolist()}


def _coef_bounds(model: SeparatedModel, bounds) -> np.ndarray:
    box = model.grid.bounds()
    b = np.array([box["P1"], box["P2"], box["P3"]], dtype=float)
    if bounds is not None:
        bounds = np.asarray(bounds, dtype=float).reshape(3, 2)
        if np.any(bounds[:, 0] < b[:, 0] - 1e-12) or np.any(bounds[:, 1] > b[:, 1] + 1e-12):
            raise ValueError("calibration bounds exceed the surrogate box")
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValueError("calibration bounds must satisfy lo <= hi")
        b = bounds
    return b


def _lhs(n: int, lo: np.ndarray, hi: np.ndarray, seed: int) -> np.ndarray:
    u = qmc.LatinHypercube(d=lo.size, seed=np.random.default_rng(seed)).random(n)
    return lo + u * (hi - lo)


def calibrate_deterministic(model: SeparatedModel, data: ExperimentDataset, bounds=None,
                            n_starts: int = 16, seed: int = 0) -> DeterministicCalibration:
    """Least squares on mean width and depth (um^2) with multi-start Nelder-Mead."""
    b = _coef_bounds(model, bounds)
    ids = sorted(data.ids)
    e = np.array([data[c].e for c in ids])
    Wm = np.array([data[c].mean("width") for c in ids])
    Dm = np.array([data[c].mean("depth") for c in ids])

    def J(p):
        p = np.clip(p, b[:, 0], b[:, 1])
        W, D = model.evaluate_cases(e, [p[0]], [p[1]], [p[2]])
        return float(np.sum((W[:, 0] - Wm) ** 2 + (D[:, 0] - Dm) ** 2))

    if np.all(b[:, 0] == b[:, 1]):
        p = b[:, 0].copy()
        f = J(p)
        return DeterministicCalibration(p, f, p[None, :], np.array([f]), np.array([f]), ids)
    starts = _lhs(n_starts, b[:, 0], b[:, 1], seed)
    f0 = np.array([J(s) for s in starts])
    best_p, best_f, finals = None, np.inf, []
    span = b[:, 1] - b[:, 0]
    for s in starts:
        r = minimize(J, s, method="Nelder-Mead", bounds=list(map(tuple, b)),
                     options={"xatol": 1e-10 * max(span.max(), 1e-300), "fatol": 1e-14, "maxiter": 20000,
                              "maxfev": 20000, "adaptive": True})
        finals.append(r.fun)
        if r.fun < best_f:
            best_p, best_f = np.clip(r.x, b[:, 0], b[:, 1]), float(r.fun)
    finals = np.asarray(finals)
    if not np.any(finals < f0):
        raise CalibrationError(f"no start improved the objective; start objectives {f0.tolist()}")
    return DeterministicCalibration(best_p, best_f, starts, f0, finals, ids)


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------

def _case_e(case) -> float:
    return float(case.e) if hasattr(case, "e") else float(case)


class _Draws:
    """Standard normal pool for a seed, extended on demand (same prefix for the same seed)."""

    def __init__(self, seed: int, n: int):
        self.rng = np.random.default_rng(seed)
        self.z = self.rng.standard_normal((2 * n, 3))

    def get(self, m: int) -> np.ndarray:
        while self.z.shape[0] < m:
            self.z = np.vstack([self.z, self.rng.standard_normal((self.z.shape[0], 3))])
        return self.z[:m]


def _coefficient_samples(model: SeparatedModel, dist: TrivariateNormal, n: int, draws: _Draws,
                         max_reject: float = 0.5) -> tuple[np.ndarray, int, int]:
    box = model.grid.bounds()
    lo = np.array([box["P1"][0], box["P2"][0], box["P3"][0]])
    hi = np.array([box["P1"][1], box["P2"][1], box["P3"][1]])
    m = 2 * n
    while True:
        X = dist.mean[None, :] + draws.get(m) @ dist.L.T
        ok = np.all((X >= lo) & (X <= hi), axis=1)
        k = int(ok.sum())
        if k >= n:
            # only draws up to the n-th accepted one count as used
            used = int(np.flatnonzero(ok)[n - 1]) + 1
            rejected = used - n
            if rejected > max_reject * used:
                err = OutOfBoxError(f"{rejected} of {used} coefficient draws fell outside the surrogate box; "
                                    "widen the surrogate box or tighten the distribution")
                err.rejected_fraction = rejected / used
                raise err
            return X[ok][:n], rejected, used
        if m >= 16 * n:
            err = OutOfBoxError(f"{m - k} of {m} coefficient draws fell outside the surrogate box; "
                                "widen the surrogate box or tighten the distribution")
            err.rejected_fraction = (m - k) / m
            raise err
        m *= 2


def propagate(model: SeparatedModel, dist: TrivariateNormal, case, n_samples: int = 2000,
              seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Width and depth samples (um) at a case's energy density (a CaseData or e in J/mm)."""
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    X, _, _ = _coefficient_samples(model, dist, n_samples, _Draws(seed, n_samples))
    W, D = model.evaluate_cases([_case_e(case)], X[:, 0], X[:, 1], X[:, 2])
    return W[0], D[0]


# ---------------------------------------------------------------------------
# stochastic
# ---------------------------------------------------------------------------

@dataclass
class StochasticCalibration:
    dist: TrivariateNormal
    objective: float
    per_case: dict[str, dict[str, float]]
    trace: list[float]
    x: np.ndarray
    n_samples: int
    seed: int
    start_objectives: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean": self.dist.mean.tolist(), "cov": self.dist.cov.tolist(), "L": self.dist.L.tolist(),
                "units": "mm", "objective": self.objective, "per_case_kld": self.per_case,
                "trace": self.trace, "x": self.x.tolist(), "n_samples": self.n_samples, "seed": self.seed,
                "start_objectives": self.start_objectives}

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "StochasticCalibration":
        return cls(TrivariateNormal(d["mean"], d["L"]), float(d["objective"]), d.get("per_case_kld", {}),
                   list(d.get("trace", [])), np.asarray(d.get("x", []), dtype=float), int(d.get("n_samples", 2000)),
                   int(d.get("seed", 0)), list(d.get("start_objectives", [])))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StochasticCalibration":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _unpack(x: np.ndarray) -> TrivariateNormal:
    L = np.zeros((3, 3))
    L[np.diag_indices(3)] = np.exp(x[3:6])
    L[1, 0], L[2, 0], L[2, 1] = x[6], x[7], x[8]
    return TrivariateNormal(x[:3], L)


def _pack(dist: TrivariateNormal) -> np.ndarray:
    L = dist.L
    return np.concatenate([dist.mean, np.log(np.diag(L)), [L[1, 0], L[2, 0], L[2, 1]]])


@njit(cache=True, error_model="numpy")
def _silverman_rows(S):
    """Row-wise :func:`stats.silverman_bandwidth` of row-sorted samples; 0 marks a degenerate row."""
    R, n = S.shape
    out = np.zeros(R)
    for r in range(R):
        w = S[r]
        if not w[n - 1] > w[0]:
            continue
        sd = np.std(w) * np.sqrt(n / (n - 1.0))
        q = np.empty(2)
        for k, frac in enumerate((0.25, 0.75)):
            pos = frac * (n - 1)
            i = int(np.floor(pos))
            j = min(i + 1, n - 1)
            q[k] = w[i] + (pos - i) * (w[j] - w[i])
        iqr = (q[1] - q[0]) / 1.35
        spread = min(sd, iqr) if iqr > 0 else sd
        out[r] = 0.9 * spread * n ** -0.2
    return out


@njit(cache=True, error_model="numpy")
def _kld_rows(S, h, x0, dx, pv):
    """KLD of tabulated p against the linearly binned KDE of each sample row.

    Row r lives on the lattice ``x0[r] + j dx[r]``; samples are binned onto
    the same lattice extended as far as they reach and the kernel is summed
    in full (no truncation) at the p lattice points only.
    """
    R, n = S.shape
    m = pv.shape[1]
    out = np.zeros(R)
    for r in range(R):
        pos = (S[r] - x0[r]) / dx[r]
        b = np.floor(pos)
        bmin = int(b.min())
        nb = int(b.max()) - bmin + 2
        c = np.zeros(nb)
        for i in range(n):
            k = int(b[i]) - bmin
            f = pos[i] - b[i]
            c[k] += 1.0 - f
            c[k + 1] += f
        # kernel table over lattice offsets j - (bmin + k)
        off0 = -(bmin + nb - 1)
        kt = np.empty(m + nb)
        s = dx[r] / h[r]
        for t in range(m + nb - 1):
            u = (off0 + t) * s
            kt[t] = np.exp(-0.5 * u * u)
        norm = 1.0 / (n * h[r] * np.sqrt(2.0 * np.pi))
        tot = 0.0
        prev = 0.0
        for j in range(m):
            q = 0.0
            for k in range(nb):
                if c[k] != 0.0:
                    q += c[k] * kt[j - (bmin + k) - off0]
            q *= norm
            p = pv[r, j]
            val = p * (np.log(max(p, 1e-300)) - np.log(max(q, 1e-300)))
            if j > 0:
                tot += 0.5 * (prev + val)
            prev = val
        out[r] = tot * dx[r]
    return out


class _KldObjective:
    """Total KLD between experimental and propagated densities, common random numbers.

    The divergence integrand vanishes outside the experimental support, so
    each density pair is compared on a fixed lattice over that support with
    the experimental KDE tabulated once.
    """

    def __init__(self, model: SeparatedModel, data: ExperimentDataset, n_samples: int, seed: int,
                 grid_points: int = 512, data_seed: int = 0):
        self.model = model
        self.ids = sorted(data.ids)
        self.e = np.array([data[c].e for c in self.ids])
        self.n = n_samples
        self.seed = seed
        self.keys = [(c, qn) for c in self.ids for qn in QUANTITIES]
        x0, dx, pv = [], [], []
        for c in self.ids:
            exp = sample_experiment(data, c, data_seed)
            for w in exp:
                p = kde(w)
                g = np.linspace(*p.support, grid_points)
                x0.append(g[0])
                dx.append(g[1] - g[0])
                pv.append(p(g))
        self.x0, self.dx, self.pv = np.array(x0), np.array(dx), np.array(pv)
        self.draws = _Draws(seed, n_samples)

    def rows(self, dist: TrivariateNormal) -> np.ndarray:
        X, _, _ = _coefficient_samples(self.model, dist, self.n, self.draws)
        W, D = self.model.evaluate_cases(self.e, X[:, 0], X[:, 1], X[:, 2])
        S = np.empty((2 * len(self.ids), self.n))
        S[0::2], S[1::2] = W, D
        S.sort(axis=1)
        h = _silverman_rows(S)
        if np.any(h <= 0):
            c, qn = self.keys[int(np.flatnonzero(h <= 0)[0])]
            raise CalibrationError(f"degenerate simulated density for case {c} {qn}: samples have zero spread")
        val = _kld_rows(S, h, self.x0, self.dx, self.pv)
        if not np.all(np.isfinite(val)):
            c, qn = self.keys[int(np.flatnonzero(~np.isfinite(val))[0])]
            raise CalibrationError(f"non-finite KLD for case {c} {qn}")
        return val

    def breakdown(self, dist: TrivariateNormal) -> dict[str, dict[str, float]]:
        val = self.rows(dist)
        out: dict[str, dict[str, float]] = {c: {} for c in self.ids}
        for (c, qn), v in zip(self.keys, val):
            out[c][qn] = float(v)
        return out

    def __call__(self, dist: TrivariateNormal) -> float:
        return float(self.rows(dist).sum())


def stochastic_objective(model: SeparatedModel, data: ExperimentDataset, dist: TrivariateNormal,
                         n_samples: int = 2000, seed: int = 0) -> tuple[float, dict]:
    obj = _KldObjective(model, data, n_samples, seed)
    b = obj.breakdown(dist)
    return float(sum(v["width"] + v["depth"] for v in b.values())), b


def _vector_bounds(model: SeparatedModel, bounds) -> np.ndarray:
    b = _coef_bounds(model, bounds)
    span = b[:, 1] - b[:, 0]
    vb = np.zeros((9, 2))
    vb[:3] = b
    vb[3:6, 0] = np.log(1e-4 * span)
    vb[3:6, 1] = np.log(0.5 * span)
    off = 0.5 * np.array([np.sqrt(span[1] * span[0]), np.sqrt(span[2] * span[0]), np.sqrt(span[2] * span[1])])
    vb[6:, 0], vb[6:, 1] = -off, off
    return vb


def calibrate_stochastic(model: SeparatedModel, data: ExperimentDataset, init=None, bounds=None,
                         n_samples: int = 2000, seed: int = 0, n_starts: int = 6,
                         maxfev: int = 2500) -> StochasticCalibration:
    """Fit mean and Cholesky factor of the coefficient distribution by total KLD.

    ``init`` is a TrivariateNormal, a deterministic calibration (its point
    becomes the mean, marginal std 10 % of it) or None (deterministic
    calibration first). The first start is ``init``; the others are Latin
    hypercube draws over the variable bounds.
    """
    if init is None:
        init = calibrate_deterministic(model, data, bounds)
    if isinstance(init, DeterministicCalibration):
        init = TrivariateNormal(init.p, np.diag(0.1 * np.abs(init.p)))
    vb = _vector_bounds(model, bounds)
    obj = _KldObjective(model, data, n_samples, seed)
    trace: list[float] = []
    best = {"f": np.inf, "x": None}

    def F(x):
        x = np.clip(x, vb[:, 0], vb[:, 1])
        try:
            f = obj(_unpack(x))
        except OutOfBoxError as exc:
            # grows with the rejected share so the simplex is pushed back inside the box
            return 1e6 * (1.0 + getattr(exc, "rejected_fraction", 1.0))
        if f < best["f"]:
            best["f"], best["x"] = f, x.copy()
            trace.append(f)
        return f

    x0 = np.clip(_pack(init), vb[:, 0], vb[:, 1])
    starts = [x0]
    if n_starts > 1:
        lo, hi = vb[:, 0].copy(), vb[:, 1].copy()
        # random starts: stds between 2 % and 30 % of the box, mild correlations
        span = vb[:3, 1] - vb[:3, 0]
        lo[3:6], hi[3:6] = np.log(0.02 * span), np.log(0.3 * span)
        lo[6:], hi[6:] = 0.3 * vb[6:, 0], 0.3 * vb[6:, 1]
        starts += list(_lhs(n_starts - 1, lo, hi, seed + 1))
    start_f = []
    for s in starts:
        start_f.append(F(s))
        minimize(F, s, method="Nelder-Mead", bounds=list(map(tuple, vb)),
                 options={"maxfev": maxfev, "xatol": 1e-7, "fatol": 1e-9, "adaptive": True})
    if best["x"] is None:
        raise CalibrationError("stochastic calibration found no finite objective")
    dist = _unpack(best["x"])
    per_case = obj.breakdown(dist)
    total = float(sum(v["width"] + v["depth"] for v in per_case.values()))
    return StochasticCalibration(dist, total, per_case, trace, best["x"], n_samples, seed, start_f)


def parameter_series(dist: TrivariateNormal, n_steps: int, chain=None, rng: np.random.Generator | None = None,
                     intensity_factor: float = 1.0, eta_floor: float = 0.28):
    """Per-step solver coefficients from a Metropolis chain over a (mm units) distribution."""
    from .heatsource import MM_TO_SI
    from .solver import ParameterSeries
    from .stats import ChainConfig, metropolis_chain

    chain = chain or ChainConfig()
    states = metropolis_chain(dist, chain, n_steps, rng=rng)
    scale = np.array([MM_TO_SI["P1"], MM_TO_SI["P2"], MM_TO_SI["P3"]])
    return ParameterSeries(states * scale, intensity_factor, eta_floor)
