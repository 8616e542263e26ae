"""Snapshot files: grid header plus the cell fields in the container format.

Header ``meta`` keys: nx, ny, nz, dx, dy, dz, origin, substrate_top,
powder_top, symmetric_y, time, step. Arrays (float64, C order, index
[i, j, k] with k fastest): T, u (nx, ny, nz, 3 cell-centered velocity), p,
f_l, T_peak, alpha, and active (uint8).
"""
from __future__ import annotations

import os

import numpy as np

from .. import container
from .grid import FieldState, Grid


def save_snapshot(path: str | os.PathLike, grid: Grid, state: FieldState, extra: dict | None = None) -> str:
    meta = grid.to_dict()
    meta.update({"time": state.time, "step": state.step, "kind": "snapshot"})
    if extra:
        meta.update(extra)
    arrays = {"T": state.T, "u": state.velocity, "p": state.p, "f_l": state.f_l,
              "T_peak": state.T_peak, "alpha": state.alpha, "active": state.active.astype(np.uint8)}
    return container.write(path, arrays, meta)


def load_snapshot(path: str | os.PathLike) -> tuple[Grid, dict[str, np.ndarray], dict]:
    arrays, meta = container.read(path)
    keys = ("nx", "ny", "nz", "dx", "dy", "dz", "origin", "substrate_top", "powder_top", "symmetric_y")
    grid = Grid.from_dict({k: meta[k] for k in keys})
    arrays["active"] = arrays["active"].astype(bool)
    return grid, arrays, meta
