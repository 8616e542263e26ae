"""Laser toolpaths, their time discretization and the residual heat factor.

A :class:`ScanPlan` holds the in-plane toolpath of one layer; layer ``k`` of
an ``n_layers`` plan repeats it ``k * layer_thickness`` higher. Discretizing a
plan at the solver time step gives a :class:`ScanPath`, a struct-of-arrays
sequence of :class:`ScanPoint` that the residual heat factor (RHF) and the
solver consume directly.

Positions in plans and points are SI (m, m/s, W); the text config form uses
mm and mm/s.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
from numba import njit

__all__ = [
    "ScanSegment",
    "ScanPlan",
    "ScanPoint",
    "ScanPath",
    "RhfConfig",
    "discretize",
    "rhf_raw",
    "rhf_all",
    "rhf_normalized",
    "afr_preset",
    "PRESET_IDS",
    "plan_from_dict",
]


@dataclass(frozen=True)
class ScanSegment:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    speed: float
    power: float
    laser_on: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "start", tuple(float(v) for v in self.start))
        object.__setattr__(self, "end", tuple(float(v) for v in self.end))
        if len(self.start) != 3 or len(self.end) != 3:
            raise ValueError("segment endpoints must be 3D")
        if not self.speed > 0:
            raise ValueError("segment speed must be positive")
        if self.laser_on and self.start == self.end:
            raise ValueError("a laser-on segment needs distinct endpoints")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))


@dataclass(frozen=True)
class ScanPlan:
    """Toolpath of one layer plus the layer/dwell bookkeeping.

    ``interlayer_time`` separates layers in the discretized clock; it is far
    longer than any RHF time window so layers do not preheat each other, and
    the solver treats it as a full cool-down to the preheat temperature.
    """

    segments: tuple[ScanSegment, ...]
    layer_thickness: float = 40e-6
    hatch_spacing: float = 0.0
    dwell_time: float = 0.0
    n_layers: int = 1
    interlayer_time: float = 10.0
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.dwell_time < 0:
            raise ValueError("dwell_time must be >= 0")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_layers > 1 and not self.layer_thickness > 0:
            raise ValueError("multi-layer plans need a positive layer_thickness")

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments) * self.n_layers

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane bounding box (min, max) of one layer's segment endpoints."""
        pts = np.array([s.start for s in self.segments] + [s.end for s in self.segments])
        return pts.min(axis=0), pts.max(axis=0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "layer_thickness_mm": self.layer_thickness * 1e3,
            "hatch_spacing_mm": self.hatch_spacing * 1e3,
            "dwell_time_s": self.dwell_time,
            "n_layers": self.n_layers,
            "interlayer_time_s": self.interlayer_time,
            "segments": [
                {
                    "start_mm": [v * 1e3 for v in s.start],
                    "end_mm": [v * 1e3 for v in s.end],
                    "power_W": s.power,
                    "speed_mm_s": s.speed * 1e3,
                    "laser_on": s.laser_on,
                }
                for s in self.segments
            ],
        }


def plan_from_dict(data: Mapping[str, Any] | str) -> ScanPlan:
    """Inverse of :meth:`ScanPlan.to_dict`; a bare string is a preset id."""
    if isinstance(data, str):
        return afr_preset(data)
    if "preset" in data:
        return afr_preset(data["preset"], **data.get("options", {}))
    segments = [
        ScanSegment(
            start=tuple(v * 1e-3 for v in s["start_mm"]),
            end=tuple(v * 1e-3 for v in s["end_mm"]),
            power=float(s["power_W"]),
            speed=float(s["speed_mm_s"]) * 1e-3,
            laser_on=bool(s.get("laser_on", True)),
        )
        for s in data["segments"]
    ]
    return ScanPlan(
        segments=tuple(segments),
        layer_thickness=float(data.get("layer_thickness_mm", 0.04)) * 1e-3,
        hatch_spacing=float(data.get("hatch_spacing_mm", 0.0)) * 1e-3,
        dwell_time=float(data.get("dwell_time_s", 0.0)),
        n_layers=int(data.get("n_layers", 1)),
        interlayer_time=float(data.get("interlayer_time_s", 10.0)),
        name=str(data.get("name", "")),
    )


@dataclass(frozen=True)
class ScanPoint:
    position: np.ndarray
    time: float
    laser: int
    power: float
    speed: float
    layer: int


@dataclass
class ScanPath:
    """Discretized toolpath, stored column-wise."""

    position: np.ndarray  # (n, 3) m
    time: np.ndarray  # (n,) s
    laser: np.ndarray  # (n,) 0/1 normalized power L_k
    power: np.ndarray  # (n,) W
    speed: np.ndarray  # (n,) m/s
    layer: np.ndarray  # (n,) int
    dt: float = 0.0

    def __len__(self) -> int:
        return len(self.time)

    def __getitem__(self, i: int) -> ScanPoint:
        return ScanPoint(self.position[i].copy(), float(self.time[i]), int(self.laser[i]),
                         float(self.power[i]), float(self.speed[i]), int(self.layer[i]))

    def __iter__(self) -> Iterator[ScanPoint]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_laser_on(self) -> int:
        return int(self.laser.sum())


@dataclass(frozen=True)
class RhfConfig:
    R: float = 2e-4
    T_thresh: float = 2e-3

    def __post_init__(self) -> None:
        if not (self.R > 0 and self.T_thresh > 0):
            raise ValueError("RHF thresholds must be positive")


def discretize(plan: ScanPlan, dt: float) -> ScanPath:
    """Sample the plan at one point per solver step.

    Points are spaced ``speed * dt`` along each segment with both ends
    included; a segment that is not a whole number of steps ends with one
    shorter step. A dwell between
    consecutive segments emits ``round(dwell_time / dt)`` laser-off points at
    the next segment's start. A segment starting exactly where the previous
    one ended skips its duplicate first point.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    pos: list[np.ndarray] = []
    laser: list[np.ndarray] = []
    power: list[np.ndarray] = []
    speed: list[np.ndarray] = []
    layer: list[np.ndarray] = []
    time: list[np.ndarray] = []
    t = 0.0
    n_dwell = int(round(plan.dwell_time / dt))
    for k in range(plan.n_layers):
        dz = np.array([0.0, 0.0, k * plan.layer_thickness])
        prev_end = None
        for j, seg in enumerate(plan.segments):
            a = np.asarray(seg.start) + dz
            b = np.asarray(seg.end) + dz
            if j > 0 and n_dwell > 0:
                pos.append(np.repeat(a[None, :], n_dwell, axis=0))
                laser.append(np.zeros(n_dwell, dtype=np.int64))
                power.append(np.zeros(n_dwell))
                speed.append(np.full(n_dwell, seg.speed))
                layer.append(np.full(n_dwell, k, dtype=np.int64))
                time.append(t + dt * np.arange(n_dwell))
                t += dt * n_dwell
            length = seg.length
            step = seg.speed * dt
            n = int(np.floor(length / step + 1e-9)) + 1
            frac = np.arange(n) * step
            if length - frac[-1] > 1e-9 * step:
                frac = np.append(frac, length)
            direction = (b - a) / length if length > 0 else np.zeros(3)
            p = a[None, :] + frac[:, None] * direction[None, :]
            if prev_end is not None and n_dwell == 0 and np.allclose(p[0], prev_end, atol=1e-12, rtol=0):
                p = p[1:]
            m = len(p)
            if m:
                pos.append(p)
                on = 1 if seg.laser_on else 0
                laser.append(np.full(m, on, dtype=np.int64))
                power.append(np.full(m, seg.power if seg.laser_on else 0.0))
                speed.append(np.full(m, seg.speed))
                layer.append(np.full(m, k, dtype=np.int64))
                time.append(t + dt * np.arange(m))
                t += dt * m
            prev_end = b
        t += max(plan.interlayer_time - dt, 0.0) if k < plan.n_layers - 1 else 0.0
    if not pos:
        return ScanPath(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64),
                        np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64), dt)
    return ScanPath(np.concatenate(pos), np.concatenate(time), np.concatenate(laser),
                    np.concatenate(power), np.concatenate(speed), np.concatenate(layer), dt)


def rhf_raw(i: int, points: ScanPath, cfg: RhfConfig = RhfConfig()) -> float:
    """Residual heat factor of point ``i`` from the points scanned before it."""
    if not 0 <= i < len(points):
        raise IndexError(i)
    d = np.linalg.norm(points.position[:i] - points.position[i], axis=1)
    t = points.time[i] - points.time[:i]
    mask = (d < cfg.R) & (t < cfg.T_thresh)
    w = ((cfg.R - d[mask]) / cfg.R) ** 2 * ((cfg.T_thresh - t[mask]) / cfg.T_thresh)
    return float(np.sum(w * points.laser[:i][mask]))


@njit(cache=True, error_model="numpy")
def _rhf_window(pos, time, laser, R, Tt):
    n = time.shape[0]
    out = np.zeros(n)
    start = 0
    for i in range(n):
        while start < i and time[i] - time[start] >= Tt:
            start += 1
        s = 0.0
        for k in range(start, i):
            if laser[k] == 0:
                continue
            dx = pos[i, 0] - pos[k, 0]
            dy = pos[i, 1] - pos[k, 1]
            dz = pos[i, 2] - pos[k, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            if d < R:
                a = (R - d) / R
                s += a * a * ((Tt - (time[i] - time[k])) / Tt)
        out[i] = s
    return out


def rhf_all(points: ScanPath, cfg: RhfConfig = RhfConfig()) -> np.ndarray:
    """Raw RHF of every point; older points drop out of a rolling time window."""
    if len(points) == 0:
        return np.zeros(0)
    return _rhf_window(np.ascontiguousarray(points.position), points.time,
                       points.laser.astype(np.int64), cfg.R, cfg.T_thresh)


def rhf_anchor_index(points: ScanPath) -> int | None:
    """Laser-on point nearest the middle of the first layer's scan duration."""
    sel = np.flatnonzero(points.layer == points.layer.min()) if len(points) else np.zeros(0, int)
    if sel.size == 0:
        return None
    t = points.time[sel]
    mid = 0.5 * (t[0] + t[-1])
    on = sel[points.laser[sel] == 1]
    if on.size == 0:
        return None
    return int(on[np.argmin(np.abs(points.time[on] - mid))])


def rhf_normalized(points: ScanPath, cfg: RhfConfig = RhfConfig()) -> np.ndarray:
    """RHF scaled so that the steady mid-path value is 1.

    Falls back to all ones when the anchor value is zero (e.g. a single
    isolated point).
    """
    raw = rhf_all(points, cfg)
    anchor = rhf_anchor_index(points)
    if anchor is None or raw[anchor] <= 0.0:
        return np.ones_like(raw)
    return raw / raw[anchor]


# ---------------------------------------------------------------------------
# AFRL presets
# ---------------------------------------------------------------------------

# case: (power W, speed mm/s)
_SINGLE_TRACK = {
    "A1": (300.0, 1230.0), "A2": (300.0, 1230.0), "A3": (290.0, 953.0),
    "A4": (370.0, 1230.0), "A5": (225.0, 1230.0), "A6": (290.0, 1588.0),
    "A7": (241.0, 990.0), "A8": (349.0, 1430.0), "A9": (300.0, 1230.0),
    "A10": (349.0, 1058.0), "A11": (241.0, 1529.0),
}
# case: (power W, speed mm/s, layer thickness um, track length mm, layers)
_THIN_WALL = {
    "B1": (300.0, 1230.0, 40.0, 5.0, 10),
    "B2": (241.0, 1529.0, 40.0, 5.0, 10),
}
# case: (power W, speed mm/s, hatch mm, plane (track length, width) mm, tracks, serpentine)
_MULTI_TRACK = {
    "C1": (300.0, 1230.0, 0.1, (3.0, 3.0), 30, True),
    "C2": (300.0, 1230.0, 0.1, (10.0, 3.0), 30, True),
    "C3": (300.0, 1230.0, 0.075, (10.0, 3.0), 40, True),
    "C4": (300.0, 1230.0, 0.125, (10.0, 3.0), 24, True),
    "C5": (300.0, 1230.0, 0.1, (10.0, 3.0), 30, False),
    "C6": (290.0, 953.0, 0.1, (15.0, 3.0), 30, True),
}
PRESET_IDS = tuple(_SINGLE_TRACK) + tuple(_THIN_WALL) + tuple(_MULTI_TRACK)
SINGLE_TRACK_CASES = tuple(_SINGLE_TRACK)


def single_track_conditions(case_id: str) -> tuple[float, float]:
    """(power W, speed m/s) of a single-track case."""
    P, V = _SINGLE_TRACK[case_id]
    return P, V * 1e-3


def single_track_plan(power: float, speed: float, track_length: float = 1e-3,
                      layer_thickness: float = 40e-6, name: str = "") -> ScanPlan:
    seg = ScanSegment((0.0, 0.0, 0.0), (track_length, 0.0, 0.0), speed=speed, power=power)
    return ScanPlan((seg,), layer_thickness=layer_thickness, name=name)


def multi_track_plan(power: float, speed: float, hatch: float, track_length: float,
                     n_tracks: int, serpentine: bool = True, dwell_time: float = 0.5e-3,
                     layer_thickness: float = 40e-6, name: str = "") -> ScanPlan:
    segs = []
    for j in range(n_tracks):
        y = j * hatch
        forward = (j % 2 == 0) or not serpentine
        a, b = ((0.0, y, 0.0), (track_length, y, 0.0))
        segs.append(ScanSegment(a if forward else b, b if forward else a, speed=speed, power=power))
    return ScanPlan(tuple(segs), layer_thickness=layer_thickness, hatch_spacing=hatch,
                    dwell_time=dwell_time, name=name)


def afr_preset(case_id: str, track_length: float | None = None,
               n_tracks: int | None = None, n_layers: int | None = None) -> ScanPlan:
    """Scan plan of an AFRL benchmark case.

    ``track_length`` (m), ``n_tracks`` and ``n_layers`` shorten a case for
    cheaper runs; by default single tracks are 1 mm long and multi-track and
    thin-wall cases use their full published dimensions.
    """
    if case_id in _SINGLE_TRACK:
        P, V = single_track_conditions(case_id)
        return single_track_plan(P, V, track_length or 1e-3, name=case_id)
    if case_id in _THIN_WALL:
        P, V, t_um, L_mm, layers = _THIN_WALL[case_id]
        seg = ScanSegment((0.0, 0.0, 0.0), ((track_length or L_mm * 1e-3), 0.0, 0.0),
                          speed=V * 1e-3, power=P)
        return ScanPlan((seg,), layer_thickness=t_um * 1e-6, n_layers=n_layers or layers, name=case_id)
    if case_id in _MULTI_TRACK:
        P, V, hatch, (L_mm, _W_mm), tracks, serp = _MULTI_TRACK[case_id]
        return multi_track_plan(P, V * 1e-3, hatch * 1e-3, track_length or L_mm * 1e-3,
                                n_tracks or tracks, serpentine=serp, name=case_id)
    raise KeyError(f"unknown case id {case_id!r}; valid ids: {', '.join(PRESET_IDS)}")
