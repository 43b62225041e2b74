"""Kinematic traversal of a planned path with pure-pursuit tracking.

The vehicle is a unicycle driven at constant speed.  Its attitude comes from
a plane fitted to DEM samples under the footprint, which is what rollover
detection looks at.  No dynamics, slip or suspension.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assessment import RobotSpec, roll_pitch
from ._kernels import dem_footprint, plane_fit, track_point, track_project
from .errors import RejectedInput
from .geometry import Dem
from .terrain import Mission

STUCK_WINDOW = 10.0     # s
STUCK_DISTANCE = 0.1    # m
DEFAULT_DT = 0.05
DEFAULT_MAX_TIME = 300.0


class Status(str, enum.Enum):
    SUCCESS = "Success"
    ROLLOVER = "Rollover"
    STUCK = "Stuck"
    TIMEOUT = "Timeout"
    PLAN_FAILED = "PlanFailed"


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    roll: float = 0.0
    pitch: float = 0.0
    odometer: float = 0.0
    t: float = 0.0


@dataclass
class TrialOutcome:
    status: Status
    tpl: float
    delta_x: float
    planning_time: float = 0.0  # seconds
    trace: Optional[list] = None
    detail: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status == Status.SUCCESS

    def to_dict(self):
        return {"status": self.status.value, "tpl": self.tpl, "delta_x": self.delta_x,
                "planning_time": self.planning_time, **self.detail}


def failed_plan(mission: Mission, planning_time: float = 0.0, why: str = "") -> TrialOutcome:
    return TrialOutcome(Status.PLAN_FAILED, 0.0, -mission.euclid, planning_time,
                        detail={"error": why} if why else {})


def path_xy(path) -> np.ndarray:
    """Plan-view vertices of a PlannedPath or an (n, 2+) array."""
    if hasattr(path, "waypoints"):
        arr = np.array([w.position[:2] for w in path.waypoints], dtype=float)
    else:
        arr = np.asarray(path, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] < 2:
        raise RejectedInput("path must contain at least one waypoint")
    return np.ascontiguousarray(arr[:, :2])


class Track:
    """Polyline with arc-length bookkeeping and a forward-only progress marker."""

    def __init__(self, path):
        self.xy = path_xy(path)
        seg = np.diff(self.xy, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])
        self.progress = 0.0

    def project(self, x, y, s_min=0.0, s_max=np.inf):
        """Arc length of the closest polyline point with arc length in [s_min, s_max]."""
        return float(track_project(self.xy, self.cum, self.seg_len, float(x), float(y),
                                   float(s_min), float(s_max)))

    def point_at(self, s):
        return track_point(self.xy, self.cum, self.seg_len, float(s))


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def pursuit_omega(beta: float, lookahead: float, v: float, omega_max: float) -> float:
    """Pure-pursuit turn rate for a target at bearing ``beta`` in the vehicle frame."""
    if abs(beta) > math.pi / 2:
        return math.copysign(omega_max, beta)
    w = v * 2.0 * math.sin(beta) / lookahead
    return max(-omega_max, min(omega_max, w))


def pure_pursuit_cmd(state: VehicleState, path, lookahead: float, v: float,
                     omega_max: float = 2.0, track: Track = None) -> float:
    """Angular velocity that steers toward the point ``lookahead`` beyond the nearest path point.

    With a :class:`Track` the nearest-point search only moves forward along
    the path, and the track's progress marker is advanced.
    """
    if not lookahead > 0:
        raise RejectedInput("lookahead must be positive")
    tr = track if track is not None else Track(path)
    if track is None:
        s = tr.project(state.x, state.y)
    else:
        # search ahead of the current progress only; never jump backwards
        s = tr.project(state.x, state.y, tr.progress, tr.progress + 2.0 * lookahead + 1.0)
        tr.progress = max(tr.progress, s)
    tx, ty = tr.point_at(s + lookahead)
    if math.hypot(tx - state.x, ty - state.y) < 1e-12:
        return 0.0
    beta = _wrap(math.atan2(ty - state.y, tx - state.x) - state.yaw)
    return pursuit_omega(beta, lookahead, v, omega_max)


def _stencil(spec: RobotSpec, cell: float) -> np.ndarray:
    r = spec.patch_radius
    g = np.arange(-r, r + 1e-9, cell / 2.0)
    gx, gy = np.meshgrid(g, g)
    keep = gx * gx + gy * gy <= r * r + 1e-12
    return np.column_stack([gx[keep], gy[keep]])


_STENCILS = {}


def terrain_attitude(dem: Dem, x: float, y: float, yaw: float, spec: RobotSpec):
    """``(roll, pitch)`` of the vehicle from a plane fit to DEM samples under its footprint.

    Samples sit on a half-cell lattice inside the footprint circle and are
    clamped to the DEM extent.
    """
    key = (spec.patch_radius, dem.cell_size)
    st = _STENCILS.get(key)
    if st is None:
        st = _STENCILS[key] = _stencil(spec, dem.cell_size)
    pts = dem_footprint(dem.elevations, dem.origin[0], dem.origin[1], dem.cell_size, st, x, y)
    _, normal, w = plane_fit(pts)
    if w[1] < 1e-12 * max(w[2], 1e-300):
        return 0.0, 0.0
    return roll_pitch(normal, yaw)


def step(state: VehicleState, v: float, omega: float, dt: float, dem: Dem,
         spec: RobotSpec = RobotSpec()) -> VehicleState:
    """Advance the unicycle by one explicit Euler step and refresh its attitude."""
    if not dt > 0:
        raise RejectedInput("dt must be positive")
    x = state.x + v * math.cos(state.yaw) * dt
    y = state.y + v * math.sin(state.yaw) * dt
    yaw = state.yaw + omega * dt
    roll, pitch = terrain_attitude(dem, x, y, yaw, spec) if dem.contains(x, y) else (state.roll, state.pitch)
    return VehicleState(x, y, yaw, roll, pitch, state.odometer + abs(v) * dt, state.t + dt)


def _tipped(state: VehicleState, spec: RobotSpec) -> bool:
    m = spec.rollover_margin
    return not (spec.roll_limits[0] - m <= state.roll <= spec.roll_limits[1] + m
                and spec.pitch_limits[0] - m <= state.pitch <= spec.pitch_limits[1] + m)


def rollout(dem: Dem, cloud, path, mission: Mission, spec: RobotSpec = RobotSpec(),
            dt: float = DEFAULT_DT, max_time: float = DEFAULT_MAX_TIME,
            planning_time: float = 0.0, record_trace: bool = False) -> TrialOutcome:
    """Drive ``path`` from the mission start and report how the trial ended.

    ``cloud`` is accepted for interface symmetry; attitude is read from the
    DEM, which is the ground truth the cloud was sampled from.
    """
    if not dt > 0 or not max_time > 0:
        raise RejectedInput("dt and max_time must be positive")
    track = Track(path)
    gx, gy = mission.goal
    sx, sy = mission.start
    if len(track.xy) > 1:
        yaw0 = math.atan2(track.xy[1, 1] - track.xy[0, 1], track.xy[1, 0] - track.xy[0, 0])
    else:
        yaw0 = math.atan2(gy - sy, gx - sx)
    if not dem.contains(sx, sy):
        raise RejectedInput("mission start lies outside the DEM")
    roll, pitch = terrain_attitude(dem, sx, sy, yaw0, spec)
    state = VehicleState(sx, sy, yaw0, roll, pitch)
    v = spec.speed
    window = max(1, int(round(STUCK_WINDOW / dt)))
    history = [(sx, sy)]
    trace = [state] if record_trace else None
    n_max = int(math.ceil(max_time / dt - 1e-9))
    status = Status.TIMEOUT
    reason = "max_time"
    for n in range(n_max + 1):
        if math.hypot(state.x - gx, state.y - gy) <= spec.goal_tolerance:
            status = Status.SUCCESS
            break
        if _tipped(state, spec):
            status = Status.ROLLOVER
            break
        if n >= window:
            ox, oy = history[n - window]
            if math.hypot(state.x - ox, state.y - oy) < STUCK_DISTANCE:
                status = Status.STUCK
                break
        if n == n_max:
            break
        w = pure_pursuit_cmd(state, path, spec.lookahead, v, spec.omega_max, track)
        state = step(state, v, w, dt, dem, spec)
        history.append((state.x, state.y))
        if record_trace:
            trace.append(state)
        if not dem.contains(state.x, state.y):
            status, reason = Status.TIMEOUT, "left_extent"
            break
    tpl = state.odometer
    detail = {"final_xy": [state.x, state.y], "time": state.t}
    if status == Status.TIMEOUT:
        detail["timeout_reason"] = reason
    return TrialOutcome(status, tpl, tpl - mission.euclid, planning_time, trace, detail)


def straight_line_baseline(dem: Dem, cloud, mission: Mission, spec: RobotSpec = RobotSpec(),
                           dt: float = DEFAULT_DT, max_time: float = DEFAULT_MAX_TIME,
                           record_trace: bool = False) -> TrialOutcome:
    """Drive straight from start to goal without planning."""
    path = np.array([mission.start, mission.goal], dtype=float)
    return rollout(dem, cloud, path, mission, spec, dt, max_time, 0.0, record_trace)


def trace_rows(trace):
    return [{"t": s.t, "x": s.x, "y": s.y, "yaw": s.yaw, "roll": s.roll, "pitch": s.pitch,
             "odometer": s.odometer} for s in trace]


__all__ = ["Status", "VehicleState", "TrialOutcome", "Track", "pure_pursuit_cmd", "pursuit_omega",
           "step", "rollout", "straight_line_baseline", "terrain_attitude", "failed_plan"]
