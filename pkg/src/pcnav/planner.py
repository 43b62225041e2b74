"""Three-phase planner: Bi-RRT initial path, RRT* refinement, lateral-offset trajectory optimisation.

Only waypoints are assessed; the segments between consecutive waypoints are
assumed drivable.  Every phase works in the plan view for sampling and
neighbourhoods and uses 3D distances for path cost.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._kernels import (choose_parent, count_within2d, lattice_dp_tables, lattice_tables, nearest2d,
                       refresh_tables, rewire_gain, route_cost, within2d)
from .assessment import RobotSpec, WaypointPose, assess_waypoint, point_roughness
from .errors import InfeasibleEndpoint, PlanningTimeout, RejectedInput
from .geometry import PointCloud
from .params import ParameterSet
from .terrain import Mission


@dataclass(frozen=True)
class PlannerLimits:
    birrt_iters: int = 50_000
    rrtstar_iters: int = 20_000
    lto_iters: int = 1_000


@dataclass(frozen=True)
class LtoWeights:
    length: float = 1.0
    curvature: float = 0.5
    roughness: float = 2.0
    decay: float = 0.5
    n_levels: int = 1


@dataclass
class PlannedPath:
    waypoints: list
    info: dict = field(default_factory=dict)

    @property
    def xyz(self) -> np.ndarray:
        return np.array([w.position for w in self.waypoints]).reshape(-1, 3)

    @property
    def length(self) -> float:
        return path_length(self.xyz)

    def __len__(self):
        return len(self.waypoints)


def path_length(xyz) -> float:
    xyz = np.asarray(xyz, dtype=float)
    if len(xyz) < 2:
        return 0.0
    return float(np.sqrt((np.diff(xyz, axis=0) ** 2).sum(axis=1)).sum())


def near_radius(k: float, dist: float) -> float:
    """RRT* neighbourhood radius, proportional to the start-goal distance."""
    return k * dist


def density_average(alpha: float, n_i: float, prev: float) -> float:
    """Exponential moving average of the vertex count near new samples."""
    return alpha * n_i + (1.0 - alpha) * prev


class Assessor:
    """Counts terrain assessments; the count drives the deterministic work clock."""

    def __init__(self, cloud: PointCloud, spec: RobotSpec):
        self.cloud = cloud
        self.spec = spec
        self.calls = 0

    def __call__(self, x, y, heading):
        self.calls += 1
        return assess_waypoint(self.cloud, (x, y), heading, self.spec)


class SearchTree:
    """Growable array-backed tree of waypoint poses with cumulative 3D cost."""

    def __init__(self, root: WaypointPose, capacity: int = 256):
        self.xy = np.empty((capacity, 2))
        self.xyz = np.empty((capacity, 3))
        self.parent = np.full(capacity, -1, dtype=np.int64)
        self.cost = np.zeros(capacity)
        self.poses = []
        self.children = []
        self.n = 0
        self.add(root, -1)

    def add(self, pose: WaypointPose, parent: int) -> int:
        if self.n == len(self.xy):
            cap = 2 * self.n
            self.xy = np.resize(self.xy, (cap, 2))
            self.xyz = np.resize(self.xyz, (cap, 3))
            self.parent = np.resize(self.parent, cap)
            self.cost = np.resize(self.cost, cap)
        i = self.n
        self.xy[i] = pose.position[:2]
        self.xyz[i] = pose.position
        self.parent[i] = parent
        self.cost[i] = 0.0 if parent < 0 else self.cost[parent] + self.dist(parent, pose.position)
        self.poses.append(pose)
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.n += 1
        return i

    def dist(self, i: int, p) -> float:
        d = self.xyz[i] - p
        return math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])

    def nearest(self, x: float, y: float):
        return nearest2d(self.xy, self.n, x, y)

    def within(self, x: float, y: float, r: float):
        return within2d(self.xy, self.n, x, y, r)

    def count_within(self, x: float, y: float, r: float) -> int:
        return count_within2d(self.xy, self.n, x, y, r)

    def branch(self, i: int):
        """Indices from the root down to ``i``."""
        out = []
        while i >= 0:
            out.append(i)
            i = self.parent[i]
        return out[::-1]

    def reparent(self, i: int, new_parent: int, pose: WaypointPose) -> None:
        old = self.parent[i]
        self.children[old].remove(i)
        self.children[new_parent].append(i)
        self.parent[i] = new_parent
        self.poses[i] = pose
        delta = self.cost[new_parent] + self.dist(new_parent, self.xyz[i]) - self.cost[i]
        stack = [i]
        while stack:
            v = stack.pop()
            self.cost[v] += delta
            stack.extend(self.children[v])

    def audit(self, tol: float = 1e-9) -> None:
        """Raise AssertionError unless every cost equals parent cost plus edge length."""
        roots = [i for i in range(self.n) if self.parent[i] < 0]
        assert roots == [0], f"expected a single root at 0, got {roots}"
        for i in range(1, self.n):
            p = self.parent[i]
            want = self.cost[p] + self.dist(p, self.xyz[i])
            assert abs(self.cost[i] - want) <= tol * max(1.0, want), f"cost mismatch at vertex {i}"
            assert i in self.children[p]
        for i in range(self.n):
            seen = set()
            v = i
            while v >= 0:
                assert v not in seen, "cycle in tree"
                seen.add(v)
                v = self.parent[v]


def _heading(ax, ay, bx, by):
    return math.atan2(by - ay, bx - ax)


def _bounds(cloud: PointCloud, bounds):
    return cloud.bounds() if bounds is None else tuple(float(b) for b in bounds)


# --- phase 1 ---------------------------------------------------------------

def birrt_plan(cloud: PointCloud, mission: Mission, ps: ParameterSet, spec: RobotSpec, rng,
               max_iters: int = 50_000, bounds=None, assessor: Assessor = None,
               connect: bool = False) -> PlannedPath:
    """Grow trees from start and goal until two vertices are close enough to join.

    Trees alternate.  Each iteration samples uniformly over ``bounds`` (the
    cloud's plan-view extent by default), steps the active tree at most
    ``ps.r_bi_exp`` from its nearest vertex, and keeps the new vertex only if
    it assesses as traversable.  With ``connect`` the opposing tree then
    extends toward the new vertex in ``r_bi_exp`` steps until blocked.  Two
    vertices from opposite trees join when they are within ``r_bi_exp`` and
    the midpoint between them is traversable.  Goal-tree vertices are
    assessed facing their parent, i.e. in the direction the vehicle drives.
    """
    ass = assessor or Assessor(cloud, spec)
    (sx, sy), (gx, gy) = mission.start, mission.goal
    h0 = _heading(sx, sy, gx, gy)
    calls0 = ass.calls
    a_s = ass(sx, sy, h0)
    a_g = ass(gx, gy, h0)
    if not a_s.traversable or not a_g.traversable:
        bad = "start" if not a_s.traversable else "goal"
        reason = (a_s if bad == "start" else a_g).reason
        raise InfeasibleEndpoint(f"{bad} is not traversable ({reason.value})")
    x0, y0, x1, y1 = _bounds(cloud, bounds)
    r = ps.r_bi_exp
    trees = (SearchTree(a_s.pose), SearchTree(a_g.pose))

    def extend(side, j, qx, qy, d):
        tree = trees[side]
        px, py = tree.xy[j]
        if d > r:
            qx = px + (qx - px) * (r / d)
            qy = py + (qy - py) * (r / d)
        heading = _heading(px, py, qx, qy) if side == 0 else _heading(qx, qy, px, py)
        verdict = ass(qx, qy, heading)
        if not verdict.traversable:
            return -1
        return tree.add(verdict.pose, j)

    def try_join(s_idx, g_idx):
        a, b = trees[0].xy[s_idx], trees[1].xy[g_idx]
        d = math.hypot(b[0] - a[0], b[1] - a[1])
        if d > r:
            return False
        if d > 1e-9:
            mid = ass(0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), _heading(a[0], a[1], b[0], b[1]))
            return mid.traversable
        return True

    for it in range(max_iters):
        side = it % 2
        tree, other = trees[side], trees[1 - side]
        qx = rng.uniform(x0, x1)
        qy = rng.uniform(y0, y1)
        j, d = tree.nearest(qx, qy)
        if d < 1e-12:
            continue
        v = extend(side, j, qx, qy, d)
        if v < 0:
            continue
        vx, vy = tree.xy[v]
        u, du = other.nearest(vx, vy)
        if connect:
            while du > r:
                w = extend(1 - side, u, vx, vy, du)
                if w < 0:
                    break
                u = w
                du = math.hypot(other.xy[u, 0] - vx, other.xy[u, 1] - vy)
        s_idx, g_idx = (v, u) if side == 0 else (u, v)
        if not try_join(s_idx, g_idx):
            continue
        ts, tg = trees
        poses = [ts.poses[i] for i in ts.branch(s_idx)]
        gposes = [tg.poses[i] for i in tg.branch(g_idx)[::-1]]
        if math.hypot(*(ts.xy[s_idx] - tg.xy[g_idx])) <= 1e-9:
            gposes = gposes[1:]
        info = {"birrt_iters": it + 1, "birrt_assessments": ass.calls - calls0,
                "birrt_tree_sizes": (ts.n, tg.n)}
        return PlannedPath(poses + gposes, info)
    raise PlanningTimeout(f"Bi-RRT did not connect within {max_iters} iterations")


# --- phase 2 ---------------------------------------------------------------

def rrtstar_refine(cloud: PointCloud, initial: PlannedPath, mission: Mission, ps: ParameterSet,
                   spec: RobotSpec, rng, max_iters: int = 20_000, bounds=None,
                   assessor: Assessor = None, return_tree: bool = False):
    """Shorten ``initial`` with RRT* until the near-sample vertex density saturates.

    Each iteration picks a random tree vertex and samples uniformly in the
    disk of radius ``r_near = k * euclid`` around it.  ``N_i`` is the number
    of vertices within ``r_near`` of that sample and feeds the moving average
    ``N_avg``; the loop stops once ``N_avg > n_avg_max``.  Otherwise the
    nearest vertex is steered at most ``r_star_exp`` toward the sample, the
    cheapest traversable parent is chosen, and neighbours are rewired.
    Parent and rewire candidates lie within ``r_near``.  An edge longer than
    ``max(r_bi_exp, r_star_exp)`` is accepted only if evenly spaced points
    along it, no further apart than that, all assess as traversable.
    """
    ass = assessor or Assessor(cloud, spec)
    x0, y0, x1, y1 = _bounds(cloud, bounds)
    wps = initial.waypoints
    tree = SearchTree(wps[0], capacity=max(256, 2 * len(wps)))
    for i, w in enumerate(wps[1:]):
        tree.add(w, i)
    goal = tree.n - 1
    start_len = float(tree.cost[goal])
    r_near = near_radius(ps.k, mission.euclid)
    # edges may reach r_near; anything longer than the expansion step is
    # checked at intermediate points so no unassessed gap exceeds it
    span = max(ps.r_bi_exp, ps.r_star_exp)

    def clear(ax, ay, bx, by):
        d = math.hypot(bx - ax, by - ay)
        n = math.ceil(d / span - 1e-9)
        h = _heading(ax, ay, bx, by)
        for i in range(1, n):
            f = i / n
            if not ass(ax + (bx - ax) * f, ay + (by - ay) * f, h).traversable:
                return False
        return True
    navg = 0.0
    trace = []
    calls0 = ass.calls
    capped = True
    for it in range(1, max_iters + 1):
        j = int(rng.integers(tree.n))
        rho = r_near * math.sqrt(rng.uniform())
        th = rng.uniform(0.0, 2 * math.pi)
        sx = tree.xy[j, 0] + rho * math.cos(th)
        sy = tree.xy[j, 1] + rho * math.sin(th)
        n_i = tree.count_within(sx, sy, r_near)
        navg = density_average(ps.alpha, n_i, navg)
        trace.append((n_i, navg))
        if navg > ps.n_avg_max:
            capped = False
            break
        if not (x0 <= sx <= x1 and y0 <= sy <= y1):
            continue
        q0, d = tree.nearest(sx, sy)
        if d < 1e-12:
            continue
        px, py = tree.xy[q0]
        step = min(1.0, ps.r_star_exp / d)
        qx, qy = px + (sx - px) * step, py + (sy - py) * step
        verdict = ass(qx, qy, _heading(px, py, qx, qy))
        if not verdict.traversable:
            continue
        pose = verdict.pose
        q = pose.position
        cand = tree.within(qx, qy, r_near)
        best, _ = choose_parent(tree.xyz, tree.cost, cand, q0, q[0], q[1], q[2])
        best = int(best)
        if best != q0:
            bx, by = tree.xy[best]
            alt = ass(qx, qy, _heading(bx, by, qx, qy))
            if alt.traversable and clear(bx, by, qx, qy):
                pose = alt.pose
            else:
                best = q0
        v = tree.add(pose, best)
        gain = rewire_gain(tree.xyz, tree.cost, cand, v)
        for u in cand[gain]:
            u = int(u)
            if u == best or u == 0:
                continue
            # an earlier rewire may have lowered this vertex's cost already
            if tree.cost[v] + tree.dist(v, tree.xyz[u]) >= tree.cost[u] - 1e-12:
                continue
            ux, uy = tree.xy[u]
            re = ass(ux, uy, _heading(qx, qy, ux, uy))
            if re.traversable and clear(qx, qy, ux, uy):
                tree.reparent(u, v, re.pose)
    chain = tree.branch(goal)
    out = PlannedPath([tree.poses[i] for i in chain],
                      {"rrtstar_iters": len(trace), "rrtstar_assessments": ass.calls - calls0,
                       "rrtstar_capped": capped, "rrtstar_trace": trace, "r_near": r_near,
                       "rrtstar_initial_length": start_len, "rrtstar_tree_size": tree.n})
    assert out.length <= start_len + 1e-9
    return (out, tree) if return_tree else out


# --- phase 3 ---------------------------------------------------------------

class Lattice:
    """Columns of lateral subvertices around the input route.

    Column ``t`` holds the input vertex at slot 0, offsets ``+-delta_t*l/L``
    at slots ``2l-1`` and ``2l``, and the currently chosen subvertex in the
    last slot.  Endpoints hold only their input vertex.  Untraversable
    subvertices are marked invalid.
    """

    def __init__(self, poses, n_levels: int = 1):
        self.n = len(poses)
        self.L = n_levels
        self.K = 2 + 2 * n_levels
        self.pts = np.zeros((self.n, self.K, 3))
        self.rough = np.zeros((self.n, self.K))
        self.valid = np.zeros((self.n, self.K), dtype=np.bool_)
        self.poses = [[None] * self.K for _ in range(self.n)]
        for t, p in enumerate(poses):
            self.set_sub(t, 0, p)

    def set_sub(self, t, i, pose):
        self.poses[t][i] = pose
        if pose is None:
            self.valid[t, i] = False
            return
        self.pts[t, i] = pose.position
        self.rough[t, i] = pose.roughness
        self.valid[t, i] = True


def lto_optimize(cloud: PointCloud, path: PlannedPath, ps: ParameterSet, spec: RobotSpec, rng,
                 max_iters: int = 1_000, weights: LtoWeights = LtoWeights(),
                 assessor: Assessor = None) -> PlannedPath:
    """Refine a path by re-routing through a shrinking lattice of lateral offsets.

    Every interior vertex starts with offset ``delta_max``, measured across
    the input route.  Each iteration picks one vertex still above
    ``delta_min``, halves its offset (floored at ``delta_min``), rebuilds its
    column and re-solves the route by dynamic programming.  The chosen
    subvertex is carried into the rebuilt column, so the cost never increases
    and no vertex moves more than ``delta_max`` from the input route.
    """
    ass = assessor or Assessor(cloud, spec)
    calls0 = ass.calls
    w = weights
    lat = Lattice(path.waypoints, w.n_levels)
    n = lat.n
    if n <= 2:
        return PlannedPath(list(path.waypoints), {"lto_iters": 0, "lto_costs": [], "lto_assessments": 0})
    delta = np.full(n, ps.delta_max)
    delta[0] = delta[-1] = 0.0
    route = np.zeros(n, dtype=np.int64)
    keep = lat.K - 1
    xyz = np.array([p.position for p in path.waypoints])
    # lateral direction and heading of each column, fixed by the input route
    heading = np.zeros(n)
    for t in range(1, n - 1):
        dx, dy = xyz[t + 1, 0] - xyz[t - 1, 0], xyz[t + 1, 1] - xyz[t - 1, 1]
        heading[t] = math.atan2(dy, dx) if math.hypot(dx, dy) > 1e-12 else path.waypoints[t].heading

    def rebuild(t):
        current = lat.poses[t][route[t]]
        lx, ly = -math.sin(heading[t]), math.cos(heading[t])
        cx, cy = xyz[t, 0], xyz[t, 1]
        for lvl in range(1, lat.L + 1):
            off = delta[t] * lvl / lat.L
            for s, slot in ((1.0, 2 * lvl - 1), (-1.0, 2 * lvl)):
                v = ass(cx + s * off * lx, cy + s * off * ly, heading[t])
                lat.set_sub(t, slot, v.pose if v.traversable else None)
        lat.set_sub(t, keep, current)
        route[t] = keep

    for t in range(1, n - 1):
        rebuild(t)
    base = route_cost(lat.pts, lat.rough, route, w.length, w.curvature, w.roughness)
    E, C = lattice_tables(lat.pts)
    new_route, cost = lattice_dp_tables(E, C, lat.rough, lat.valid, w.length, w.curvature, w.roughness)
    route[:] = new_route
    costs = [base, cost]
    iters = 0
    tol = ps.delta_min * 1e-9
    while iters < max_iters:
        active = np.flatnonzero(delta[1:-1] > ps.delta_min + tol) + 1
        if len(active) == 0:
            break
        t = int(active[rng.integers(len(active))])
        delta[t] = max(ps.delta_min, delta[t] * w.decay)
        rebuild(t)
        refresh_tables(lat.pts, E, C, t - 1, t + 1)
        new_route, new_cost = lattice_dp_tables(E, C, lat.rough, lat.valid, w.length, w.curvature, w.roughness)
        if new_cost > costs[-1] + 1e-9 * max(1.0, abs(costs[-1])):
            raise AssertionError("trajectory optimisation cost increased")
        route[:] = new_route
        costs.append(new_cost)
        iters += 1
    poses = [lat.poses[t][route[t]] for t in range(n)]
    return PlannedPath(poses, {"lto_iters": iters, "lto_costs": costs,
                               "lto_assessments": ass.calls - calls0,
                               "lto_capped": iters >= max_iters and bool(np.any(delta[1:-1] > ps.delta_min + tol))})


# --- all phases ------------------------------------------------------------

def plan(cloud: PointCloud, mission: Mission, ps: ParameterSet, spec: RobotSpec, seed,
         limits: PlannerLimits = PlannerLimits(), weights: LtoWeights = LtoWeights(), bounds=None):
    """Run the three phases in order; return ``(path, planning_time_seconds)``.

    ``path.info`` carries per-phase wall times, iteration counts and the
    number of terrain assessments (the basis of the work clock).
    """
    if isinstance(seed, np.random.Generator):
        raise RejectedInput("plan() takes an integer seed, not a generator")
    rng = np.random.default_rng(seed)
    ass = Assessor(cloud, spec)
    # per-point roughness is a property of the cloud, computed once and cached; keep it off the clock
    point_roughness(cloud, spec.normal_radius)
    t0 = time.perf_counter()
    p1 = birrt_plan(cloud, mission, ps, spec, rng, limits.birrt_iters, bounds, ass)
    t1 = time.perf_counter()
    p2 = rrtstar_refine(cloud, p1, mission, ps, spec, rng, limits.rrtstar_iters, bounds, ass)
    t2 = time.perf_counter()
    p3 = lto_optimize(cloud, p2, ps, spec, rng, limits.lto_iters, weights, ass)
    t3 = time.perf_counter()
    info = {}
    for p in (p1, p2, p3):
        info.update(p.info)
    info.update({
        "phase_ms": [1e3 * (t1 - t0), 1e3 * (t2 - t1), 1e3 * (t3 - t2)],
        "planning_time_ms": 1e3 * (t3 - t0),
        "assessments": ass.calls,
        "birrt_length": p1.length,
        "rrtstar_length": p2.length,
        "length": p3.length,
    })
    return PlannedPath(p3.waypoints, info), t3 - t0


# --- path files ------------------------------------------------------------

PATH_COLUMNS = ("x", "y", "z", "roll", "pitch", "heading")


def write_path_csv(path: PlannedPath, dest) -> None:
    with open(dest, "w", encoding="utf-8") as fh:
        fh.write(",".join(PATH_COLUMNS) + "\n")
        for w in path.waypoints:
            x, y, z = (float(v) for v in w.position)
            fh.write(",".join(repr(v) for v in (x, y, z, float(w.roll), float(w.pitch), float(w.heading))) + "\n")


def read_path_csv(src) -> np.ndarray:
    """``(n, 6)`` array of x, y, z, roll, pitch, heading."""
    with open(src, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != PATH_COLUMNS:
            raise RejectedInput(f"{src}: expected columns {','.join(PATH_COLUMNS)}")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    arr = np.array(rows, dtype=float).reshape(-1, len(PATH_COLUMNS))
    if len(arr) == 0:
        raise RejectedInput(f"{src}: no waypoints")
    return arr
