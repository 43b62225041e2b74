"""Terrain assessment: vehicle pose from a robot-sized patch, and traversability.

Conventions: pitch is positive nose-up along the heading; roll is positive
when the left side of the vehicle is raised.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._kernels import nanmax_at
from .errors import DegenerateFit, RejectedInput, TooFewPoints
from .geometry import PointCloud, batched_normals, fit_plane


@dataclass(frozen=True)
class RobotSpec:
    footprint_length: float = 0.99
    footprint_width: float = 0.67
    tire_radius: float = 0.19
    roll_limits: tuple = (-0.523, 0.523)
    pitch_limits: tuple = (-0.61, 0.785)
    roughness_limit: float = 0.19
    speed: float = 1.0
    lookahead: float = 1.0
    goal_tolerance: float = 0.5
    r_normal: Optional[float] = None  # per-point roughness radius; None -> tire diameter
    min_patch_points: int = 10
    omega_max: float = 2.0
    rollover_margin: float = 0.1

    def __post_init__(self):
        for name in ("footprint_length", "footprint_width", "tire_radius", "roughness_limit",
                     "speed", "lookahead", "goal_tolerance", "omega_max"):
            if not getattr(self, name) > 0:
                raise RejectedInput(f"{name} must be positive")
        object.__setattr__(self, "roll_limits", tuple(float(v) for v in self.roll_limits))
        object.__setattr__(self, "pitch_limits", tuple(float(v) for v in self.pitch_limits))
        if not (self.roll_limits[0] < self.roll_limits[1] and self.pitch_limits[0] < self.pitch_limits[1]):
            raise RejectedInput("limit pairs must satisfy min < max")

    @property
    def patch_radius(self) -> float:
        return 0.5 * math.hypot(self.footprint_length, self.footprint_width)

    @property
    def normal_radius(self) -> float:
        # a tire-diameter ball is the smallest that sees a tire-radius step whole
        return 2.0 * self.tire_radius if self.r_normal is None else self.r_normal


PROFILES = {
    "sim": RobotSpec(),
    "field": RobotSpec(roll_limits=(-0.15, 0.15), pitch_limits=(-0.15, 0.15)),
}


def robot_profile(name: str, **overrides) -> RobotSpec:
    try:
        spec = PROFILES[name]
    except KeyError:
        raise RejectedInput(f"unknown robot profile {name!r}; choose from {sorted(PROFILES)}") from None
    return replace(spec, **overrides) if overrides else spec


@dataclass(frozen=True)
class WaypointPose:
    position: np.ndarray
    heading: float
    roll: float
    pitch: float
    normal: np.ndarray
    roughness: float = 0.0  # largest per-point roughness score inside the patch


class Reason(str, enum.Enum):
    TOO_FEW_POINTS = "TooFewPoints"
    ROLL_LIMIT = "RollLimit"
    PITCH_LIMIT = "PitchLimit"
    ROUGHNESS = "Roughness"


@dataclass(frozen=True)
class Traversability:
    pose: Optional[WaypointPose] = None
    reason: Optional[Reason] = None

    @property
    def traversable(self) -> bool:
        return self.reason is None

    def __bool__(self):
        return self.traversable


def roll_pitch(normal, heading: float):
    """Vehicle ``(roll, pitch)`` on a plane with unit up-facing ``normal``."""
    nx, ny, nz = float(normal[0]), float(normal[1]), float(normal[2])
    c, s = math.cos(heading), math.sin(heading)
    hn = c * nx + s * ny
    fx, fy, fz = c - hn * nx, s - hn * ny, -hn * nz
    fn = math.sqrt(fx * fx + fy * fy + fz * fz)
    fx, fy, fz = fx / fn, fy / fn, fz / fn
    pitch = math.asin(max(-1.0, min(1.0, fz)))
    # body left axis = normal x forward; its vertical component gives roll
    lz = nx * fy - ny * fx
    cp = math.cos(pitch)
    roll = math.asin(max(-1.0, min(1.0, lz / cp))) if cp > 0 else 0.0
    return roll, pitch


def _patch(cloud: PointCloud, x: float, y: float, spec: RobotSpec):
    if len(cloud) == 0:
        raise TooFewPoints("empty cloud")
    seed = cloud.points[cloud.nearest_xy_index(x, y)]
    idx = cloud.radius_indices((x, y, seed[2]), spec.patch_radius)
    if len(idx) < spec.min_patch_points:
        raise TooFewPoints(f"{len(idx)} points in patch (< {spec.min_patch_points})")
    return idx


def _pose_from_patch(cloud, idx, x, y, heading):
    try:
        fit = fit_plane(cloud.points[idx])
    except DegenerateFit as exc:
        raise TooFewPoints(str(exc)) from None
    n, c = fit.normal, fit.centroid
    if n[2] <= 1e-12:
        raise TooFewPoints("vertical patch")
    z = c[2] - (n[0] * (x - c[0]) + n[1] * (y - c[1])) / n[2]
    roll, pitch = roll_pitch(n, heading)
    return WaypointPose(np.array([x, y, z]), float(heading), roll, pitch, n)


def estimate_pose(cloud: PointCloud, xy, heading: float, spec: RobotSpec) -> WaypointPose:
    """Pose of the vehicle standing at ``xy`` facing ``heading``.

    The patch is every point within ``spec.patch_radius`` of the surface
    point nearest to the vertical through ``xy``.  The returned position is
    where that vertical meets the fitted plane.  Raises :class:`TooFewPoints`.
    """
    if not math.isfinite(heading):
        raise RejectedInput("heading must be finite")
    x, y = float(xy[0]), float(xy[1])
    return _pose_from_patch(cloud, _patch(cloud, x, y, spec), x, y, heading)


def roughness_score(cloud: PointCloud, p, r_normal: float) -> float:
    """Largest step height between neighbours of ``p``, measured along their plane normal."""
    pts = cloud.radius_query(p, r_normal)
    if len(pts) < 3:
        raise TooFewPoints(f"{len(pts)} points within {r_normal} m")
    try:
        fit = fit_plane(pts)
    except DegenerateFit as exc:
        raise TooFewPoints(str(exc)) from None
    proj = (pts - fit.centroid) @ fit.normal
    return float(proj.max() - proj.min())


def point_roughness(cloud: PointCloud, r_normal: float, chunk: int = 65536) -> np.ndarray:
    """Roughness score of every cloud point (NaN where the neighbourhood is too sparse).

    Computed once per ``(cloud, r_normal)`` and memoised on the cloud.
    """
    key = ("roughness", float(r_normal))
    cached = cloud._cache.get(key)
    if cached is not None:
        return cached
    pts = cloud.points
    out = np.full(len(pts), np.nan)
    if len(pts) >= 3:
        tree = cloud._tree
        kmax = int(np.max(tree.query_ball_point(pts, r_normal * (1 + 1e-9) + 1e-12, return_length=True)))
        kmax = min(max(kmax, 1), len(pts))
        for lo in range(0, len(pts), chunk):
            q = pts[lo:lo + chunk]
            _, nb = tree.query(q, k=kmax, distance_upper_bound=r_normal * (1 + 1e-9) + 1e-12)
            nb = nb.reshape(len(q), kmax)
            valid = nb < len(pts)
            neigh = pts[np.where(valid, nb, 0)]
            dist = np.sqrt(((neigh - q[:, None, :]) ** 2).sum(axis=2))
            valid &= dist <= r_normal
            centroid, normal, ok = batched_normals(neigh, valid)
            proj = np.einsum("mki,mi->mk", neigh - centroid[:, None, :], normal)
            hi = np.where(valid, proj, -np.inf).max(axis=1)
            lo_ = np.where(valid, proj, np.inf).min(axis=1)
            out[lo:lo + chunk] = np.where(ok, hi - lo_, np.nan)
    out.setflags(write=False)
    cloud._cache[key] = out
    return out


def assess_waypoint(cloud: PointCloud, xy, heading: float, spec: RobotSpec) -> Traversability:
    """Traversability verdict for the vehicle at ``xy`` facing ``heading``."""
    if not math.isfinite(heading):
        raise RejectedInput("heading must be finite")
    x, y = float(xy[0]), float(xy[1])
    try:
        idx = _patch(cloud, x, y, spec)
        pose = _pose_from_patch(cloud, idx, x, y, heading)
    except TooFewPoints:
        return Traversability(None, Reason.TOO_FEW_POINTS)
    if not spec.roll_limits[0] <= pose.roll <= spec.roll_limits[1]:
        return Traversability(pose, Reason.ROLL_LIMIT)
    if not spec.pitch_limits[0] <= pose.pitch <= spec.pitch_limits[1]:
        return Traversability(pose, Reason.PITCH_LIMIT)
    worst = float(nanmax_at(point_roughness(cloud, spec.normal_radius), idx))
    pose = replace(pose, roughness=worst)
    if worst > spec.roughness_limit:
        return Traversability(pose, Reason.ROUGHNESS)
    return Traversability(pose)
