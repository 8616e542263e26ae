"""Kernel density estimates, KL divergence, trivariate normals and Metropolis chains.

Symbol note: ``h`` here is always the KDE bandwidth.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Samples",
    "DensityEstimate",
    "Normal",
    "TrivariateNormal",
    "ChainConfig",
    "ChainResult",
    "silverman_bandwidth",
    "kde",
    "kde_eval",
    "binned_kde",
    "kld",
    "support_grid",
    "mvn_pdf",
    "mvn_sample",
    "metropolis_chain",
    "read_samples_csv",
    "write_density_csv",
]

_SQRT2PI = np.sqrt(2.0 * np.pi)
_FLOOR = 1e-300


@dataclass(frozen=True)
class Samples:
    values: np.ndarray
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).ravel())


def _values(samples) -> np.ndarray:
    if isinstance(samples, Samples):
        return samples.values
    return np.asarray(samples, dtype=float).ravel()


def silverman_bandwidth(samples) -> float:
    """0.9 min(std, IQR / 1.35) N^(-1/5); IQR from linearly interpolated quantiles.

    When the IQR vanishes but the spread does not, the standard deviation
    alone is used.
    """
    w = _values(samples)
    if w.size < 2:
        raise ValueError("bandwidth needs at least 2 samples")
    if not np.ptp(w) > 0:
        raise ValueError("samples have zero spread")
    sd = float(np.std(w, ddof=1))
    q75, q25 = np.percentile(w, [75.0, 25.0])
    iqr = float(q75 - q25) / 1.35
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * w.size ** -0.2


@dataclass(frozen=True)
class DensityEstimate:
    centers: np.ndarray
    h: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "centers", np.array(self.centers, dtype=float).ravel())
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError("bandwidth must be positive")
        if self.centers.size == 0:
            raise ValueError("density needs at least one center")

    def __call__(self, x):
        return kde_eval(self, x)

    @property
    def support(self) -> tuple[float, float]:
        return float(self.centers.min() - 5 * self.h), float(self.centers.max() + 5 * self.h)


@dataclass(frozen=True)
class Normal:
    """Univariate normal density, usable wherever a density is expected."""

    mu: float
    sigma: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * _SQRT2PI)

    @property
    def support(self) -> tuple[float, float]:
        return self.mu - 5 * self.sigma, self.mu + 5 * self.sigma


@dataclass(frozen=True)
class GridDensity:
    """Density tabulated on a regular grid, linearly interpolated, zero outside."""

    x: np.ndarray
    p: np.ndarray
    lo: float
    hi: float

    def __call__(self, q):
        return np.interp(q, self.x, self.p, left=0.0, right=0.0)

    @property
    def support(self) -> tuple[float, float]:
        return self.lo, self.hi


def kde(samples, h: float | None = None) -> DensityEstimate:
    w = _values(samples)
    return DensityEstimate(w, silverman_bandwidth(w) if h is None else h)


def kde_eval(density: DensityEstimate, x):
    """(1 / (N h)) sum K((x - w_i) / h) with the standard normal kernel."""
    x = np.asarray(x, dtype=float)
    c = density.centers
    h = density.h
    # chunked to bound memory for long grids
    flat = x.ravel()
    out = np.empty(flat.size)
    step = max(1, 2_000_000 // c.size)
    for s in range(0, flat.size, step):
        t = (flat[s:s + step, None] - c[None, :]) / h
        out[s:s + step] = np.exp(-0.5 * t * t).sum(axis=1)
    out /= c.size * h * _SQRT2PI
    return float(out[0]) if x.ndim == 0 else out.reshape(x.shape)


def binned_kde(samples, grid: np.ndarray, h: float | None = None) -> GridDensity:
    """Gaussian KDE on a regular grid via linear binning and convolution.

    Much cheaper than :func:`kde_eval` for many samples; the binning error is
    second order in the grid spacing. Samples must lie inside the grid.
    """
    w = _values(samples)
    h = silverman_bandwidth(w) if h is None else h
    x = np.asarray(grid, dtype=float)
    dx = x[1] - x[0]
    if not np.allclose(np.diff(x), dx, rtol=1e-9, atol=0):
        raise ValueError("binned_kde needs a regular grid")
    pos = (w - x[0]) / dx
    if pos.min() < 0 or pos.max() > x.size - 1:
        raise ValueError("samples fall outside the grid")
    i = np.minimum(np.floor(pos).astype(int), x.size - 2)
    f = pos - i
    counts = np.bincount(i, 1.0 - f, minlength=x.size) + np.bincount(i + 1, f, minlength=x.size)
    # direct convolution with the kernel kept until it underflows (38 h): a
    # shorter kernel, or FFT round-off, leaves exact zeros in the tails that
    # the log in a divergence then amplifies
    half = min(x.size - 1, int(np.ceil(38.0 * h / dx)))
    t = np.arange(-half, half + 1) * dx / h
    kern = np.exp(-0.5 * t * t) / (h * _SQRT2PI)
    p = np.convolve(counts, kern, mode="full")[half:half + x.size] / w.size
    return GridDensity(x, p, float(w.min() - 5 * h), float(w.max() + 5 * h))


def support_grid(*densities, n: int = 1000) -> np.ndarray:
    """Regular lattice covering the union of the densities' 5-bandwidth supports."""
    lo = min(d.support[0] for d in densities)
    hi = max(d.support[1] for d in densities)
    return np.linspace(lo, hi, n)


def _density_values(d, grid: np.ndarray) -> np.ndarray:
    if isinstance(d, DensityEstimate):
        return kde_eval(d, grid)
    return np.asarray(d(grid), dtype=float)


def kld(p, q, grid: np.ndarray | None = None) -> float:
    """Trapezoid quadrature of p log(p / q), densities floored inside the log.

    ``p`` is the reference (experiment) density and ``q`` the model density.
    """
    if grid is None:
        grid = support_grid(p, q)
    grid = np.asarray(grid, dtype=float)
    for d in (p, q):
        sup = getattr(d, "support", None)
        if sup is not None and (grid[0] > sup[0] + 1e-12 * abs(sup[0]) or grid[-1] < sup[1] - 1e-12 * abs(sup[1])):
            raise ValueError("integration grid does not cover the density support")
    pv = _density_values(p, grid)
    qv = _density_values(q, grid)
    integrand = pv * (np.log(np.maximum(pv, _FLOOR)) - np.log(np.maximum(qv, _FLOOR)))
    return float(np.trapezoid(integrand, grid))


# ---------------------------------------------------------------------------
# trivariate normal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrivariateNormal:
    mean: np.ndarray
    L: np.ndarray  # lower triangular, Sigma = L L^T

    def __post_init__(self) -> None:
        m = np.array(self.mean, dtype=float).reshape(3)
        L = np.tril(np.array(self.L, dtype=float).reshape(3, 3))
        if not np.all(np.diag(L) > 0):
            raise ValueError("Cholesky factor needs a strictly positive diagonal")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "L", L)

    @classmethod
    def from_cov(cls, mean, cov) -> "TrivariateNormal":
        return cls(mean, np.linalg.cholesky(np.asarray(cov, dtype=float)))

    @property
    def cov(self) -> np.ndarray:
        return self.L @ self.L.T

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def scaled(self, c: float) -> "TrivariateNormal":
        """Same mean, covariance times ``c``."""
        return TrivariateNormal(self.mean, self.L * np.sqrt(c))

    def logpdf(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        d = (x - self.mean).reshape(-1, 3).T
        z = _tri_solve(self.L, d)
        logdet = 2.0 * np.sum(np.log(np.diag(self.L)))
        out = -0.5 * np.sum(z * z, axis=0) - 0.5 * logdet - 1.5 * np.log(2.0 * np.pi)
        return float(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "L": self.L.tolist()}

    @classmethod
    def from_dict(cls, d) -> "TrivariateNormal":
        if "L" in d:
            return cls(d["mean"], d["L"])
        return cls.from_cov(d["mean"], d["cov"])


def _tri_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution for the 3x3 lower-triangular system."""
    z = np.empty_like(b, dtype=float)
    z[0] = b[0] / L[0, 0]
    z[1] = (b[1] - L[1, 0] * z[0]) / L[1, 1]
    z[2] = (b[2] - L[2, 0] * z[0] - L[2, 1] * z[1]) / L[2, 2]
    return z


def mvn_pdf(dist: TrivariateNormal, x):
    return dist.pdf(x)


def mvn_sample(dist: TrivariateNormal, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """mean + L z with independent standard normal z; shape (3,) or (size, 3)."""
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, 3))
    out = dist.mean[None, :] + z @ dist.L.T
    return out[0] if size is None else out


# ---------------------------------------------------------------------------
# Metropolis chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    # fraction of each marginal std; 1.0 gives about 0.45 acceptance on a
    # trivariate normal, 0.3 would accept about 0.8 of all proposals
    step: float = 1.0
    burn_in: int = 500
    thin: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise ValueError("step scale must be positive")
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")

    def to_dict(self) -> dict:
        return {"step": self.step, "burn_in": self.burn_in, "thin": self.thin, "seed": self.seed}


@dataclass
class ChainResult:
    states: np.ndarray  # (n_steps, 3)
    accepted: np.ndarray  # per kept state: whether its transition was accepted

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted))


def metropolis_chain(dist: TrivariateNormal, cfg: ChainConfig, n_steps: int, start=None,
                     rng: np.random.Generator | None = None, return_info: bool = False):
    """Random-walk Metropolis states targeting ``dist``, burn-in removed.

    Each kept state is one proposal step after burn-in (thinned by
    ``cfg.thin``); a rejected proposal repeats the previous state.
    """
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    scale = cfg.step * dist.std
    x = dist.mean.copy() if start is None else np.asarray(start, dtype=float).copy()
    lp = dist.logpdf(x)
    if not np.isfinite(lp):
        raise ValueError("start point has zero target density")
    total = cfg.burn_in + n_steps * cfg.thin
    z = rng.standard_normal((total, 3))
    u = rng.random(total)
    out = np.empty((n_steps, 3))
    acc = np.zeros(n_steps, dtype=bool)
    kept = 0
    for t in range(total):
        prop = x + scale * z[t]
        lq = dist.logpdf(prop)
        ok = np.log(u[t]) < lq - lp if u[t] > 0 else True
        if ok:
            x, lp = prop, lq
        if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == cfg.thin - 1:
            out[kept] = x
            acc[kept] = ok
            kept += 1
    return ChainResult(out, acc) if return_info else out


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def read_samples_csv(path: str | os.PathLike, label: str = "") -> Samples:
    """Single-column CSV; a non-numeric first row is taken as the header."""
    vals = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            try:
                vals.append(float(row[0]))
            except ValueError:
                if n == 0:
                    label = label or row[0].strip()
                    continue
                raise ValueError(f"{path}: row {n + 1} is not numeric")
    return Samples(np.asarray(vals), label)


def write_density_csv(path: str | os.PathLike, x: np.ndarray, columns: dict[str, np.ndarray],
                      x_label: str = "x_um") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([x_label] + [f"{k}_per_um" for k in columns])
        for i in range(len(x)):
            w.writerow([repr(float(x[i]))] + [repr(float(v[i])) for v in columns.values()])
