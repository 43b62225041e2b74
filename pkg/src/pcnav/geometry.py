"""Point-cloud and elevation-grid primitives.

Points are plain ``(n, 3)`` float arrays in meters.  A :class:`PointCloud`
wraps such an array with exact k-d tree indices; a :class:`Dem` is a regular
grid of elevation samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import bucket_ball, bucket_nearest_xy, bucket_sort, plane_fit
from .errors import DegenerateFit, OutOfExtent, RejectedInput

# second-smallest / largest covariance eigenvalue below this -> degenerate
DEGENERACY_RATIO = 1e-12


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.empty((0, 3))
    arr = arr.reshape(-1, 3)
    if not np.all(np.isfinite(arr)):
        raise RejectedInput("point coordinates must be finite")
    return arr


class PointCloud:
    """Immutable point set with exact radius and nearest-neighbour queries.

    Derived per-point quantities (e.g. roughness scores) are memoised on the
    instance; they never change the stored points.
    """

    def __init__(self, points):
        pts = _as_points(points).copy()
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts) if len(pts) else None
        self._bucket = None
        self._cache = {}

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"PointCloud(n={len(self)})"

    def _buckets(self):
        if self._bucket is None:
            pts = self.points
            lo = pts[:, :2].min(axis=0)
            hi = pts[:, :2].max(axis=0)
            span = np.maximum(hi - lo, 1e-9)
            # about 8 points per cell, but never more than 1024 cells along an axis
            h = max(float(np.sqrt(span[0] * span[1] * 8.0 / len(pts))), float(span.max()) / 1024.0, 1e-6)
            nx = int(span[0] / h) + 1
            ny = int(span[1] / h) + 1
            starts, order = bucket_sort(np.ascontiguousarray(pts[:, :2]), lo[0], lo[1], h, nx, ny)
            self._bucket = (np.ascontiguousarray(pts), starts, order, float(lo[0]), float(lo[1]), h, nx, ny)
        return self._bucket

    def bounds(self):
        """Return ``(xmin, ymin, xmax, ymax)`` of the cloud."""
        b = self._cache.get("bounds")
        if b is None:
            lo = self.points[:, :2].min(axis=0)
            hi = self.points[:, :2].max(axis=0)
            b = self._cache["bounds"] = (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
        return b

    def radius_indices(self, center, r: float) -> np.ndarray:
        """Sorted indices of points within Euclidean distance ``r`` of ``center``."""
        if r < 0:
            raise RejectedInput("radius must be non-negative")
        if not len(self):
            return np.empty(0, dtype=np.int64)
        return bucket_ball(*self._buckets(), float(center[0]), float(center[1]), float(center[2]), float(r))

    def radius_query(self, center, r: float) -> np.ndarray:
        return self.points[self.radius_indices(center, r)]

    def nearest_index(self, q) -> int:
        if self._tree is None:
            raise RejectedInput("nearest query on an empty cloud")
        q = np.asarray(q, dtype=float)
        dist, idx = self._tree.query(q)
        # resolve exact ties toward the lowest index, like a linear scan would
        tied = self._tree.query_ball_point(q, dist * (1 + 1e-12) + 1e-300)
        if len(tied) > 1:
            tied = np.asarray(tied)
            d = np.sqrt(((self.points[tied] - q) ** 2).sum(axis=1))
            return int(tied[d == d.min()].min())
        return int(idx)

    def nearest(self, q) -> np.ndarray:
        return self.points[self.nearest_index(q)]

    def nearest_xy_index(self, x: float, y: float) -> int:
        if self._tree is None:
            raise RejectedInput("nearest query on an empty cloud")
        return int(bucket_nearest_xy(*self._buckets(), float(x), float(y)))


def build_index(points) -> PointCloud:
    return PointCloud(points)


def radius_query(cloud: PointCloud, center, r: float) -> np.ndarray:
    """Points of ``cloud`` within Euclidean distance ``r`` of ``center``."""
    return cloud.radius_query(center, r)


@dataclass(frozen=True)
class PlaneFit:
    centroid: np.ndarray
    normal: np.ndarray
    rms_residual: float


def fit_plane(points) -> PlaneFit:
    """Total-least-squares plane through ``points``.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    oriented so that ``normal[2] >= 0``.
    """
    pts = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateFit(f"need at least 3 points, got {len(pts)}")
    centroid, normal, w = plane_fit(pts)
    if not (w[1] > DEGENERACY_RATIO * w[2]) or w[2] <= 0:
        raise DegenerateFit("points are collinear or coincident")
    # smallest eigenvalue is the mean squared orthogonal residual
    return PlaneFit(centroid, normal, float(np.sqrt(max(w[0], 0.0))))


def batched_normals(neigh: np.ndarray, mask: np.ndarray):
    """Plane normals for many padded neighbourhoods at once.

    ``neigh`` is ``(m, k, 3)``, ``mask`` is ``(m, k)`` marking valid entries.
    Returns ``(centroids, normals, ok)`` where ``ok`` flags neighbourhoods with
    at least 3 points and a non-degenerate covariance.
    """
    w8 = mask.astype(float)
    cnt = w8.sum(axis=1)
    safe = np.maximum(cnt, 1.0)
    centroid = (neigh * w8[..., None]).sum(axis=1) / safe[:, None]
    d = (neigh - centroid[:, None, :]) * w8[..., None]
    cov = np.einsum("mki,mkj->mij", d, d) / safe[:, None, None]
    w, v = np.linalg.eigh(cov)
    normal = v[:, :, 0]
    normal = np.where(normal[:, 2:3] < 0, -normal, normal)
    ok = (cnt >= 3) & (w[:, 1] > DEGENERACY_RATIO * w[:, 2]) & (w[:, 2] > 0)
    return centroid, normal, ok


@dataclass(frozen=True)
class Dem:
    """Regular elevation grid.

    ``elevations[i, j]`` is the sample at ``x = origin[0] + j*cell_size``,
    ``y = origin[1] + i*cell_size`` (row 0 is the southern edge).
    """

    origin: tuple
    cell_size: float
    elevations: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = np.array(self.elevations, dtype=float)
        if z.ndim != 2 or z.shape[0] < 2 or z.shape[1] < 2:
            raise RejectedInput("DEM grid must be at least 2x2")
        if not np.all(np.isfinite(z)):
            raise RejectedInput("DEM elevations must be finite")
        if not self.cell_size > 0:
            raise RejectedInput("cell_size must be positive")
        z.setflags(write=False)
        object.__setattr__(self, "elevations", z)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def n_rows(self) -> int:
        return self.elevations.shape[0]

    @property
    def n_cols(self) -> int:
        return self.elevations.shape[1]

    @property
    def extent(self):
        """``(width, height)`` in meters."""
        return ((self.n_cols - 1) * self.cell_size, (self.n_rows - 1) * self.cell_size)

    @property
    def bounds(self):
        x0, y0 = self.origin
        w, h = self.extent
        return x0, y0, x0 + w, y0 + h

    def contains(self, x, y, margin: float = 0.0):
        x0, y0, x1, y1 = self.bounds
        return (x >= x0 + margin) & (x <= x1 - margin) & (y >= y0 + margin) & (y <= y1 - margin)

    def xy_grid(self):
        xs = self.origin[0] + np.arange(self.n_cols) * self.cell_size
        ys = self.origin[1] + np.arange(self.n_rows) * self.cell_size
        return np.meshgrid(xs, ys)


def dem_elevation(dem: Dem, x, y):
    """Bilinear elevation at ``(x, y)``; accepts scalars or arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    tol = 1e-9 * max(1.0, dem.cell_size)
    x0, y0, x1, y1 = dem.bounds
    if np.any((x < x0 - tol) | (x > x1 + tol) | (y < y0 - tol) | (y > y1 + tol)):
        raise OutOfExtent("query outside DEM extent")
    u = np.clip((x - x0) / dem.cell_size, 0.0, dem.n_cols - 1.0)
    v = np.clip((y - y0) / dem.cell_size, 0.0, dem.n_rows - 1.0)
    j = np.minimum(np.floor(u).astype(int), dem.n_cols - 2)
    i = np.minimum(np.floor(v).astype(int), dem.n_rows - 2)
    fu = u - j
    fv = v - i
    z = dem.elevations
    out = (z[i, j] * (1 - fu) * (1 - fv) + z[i, j + 1] * fu * (1 - fv)
           + z[i + 1, j] * (1 - fu) * fv + z[i + 1, j + 1] * fu * fv)
    return float(out) if out.ndim == 0 else out


def dem_to_pointcloud(dem: Dem, spacing: float) -> PointCloud:
    """Resample the DEM on a regular lattice of the given spacing."""
    w, h = dem.extent
    if not spacing > 0:
        raise RejectedInput("spacing must be positive")
    if spacing > max(w, h):
        raise RejectedInput("spacing exceeds grid extent")
    nx = int(np.floor(w / spacing + 1 + 1e-9))
    ny = int(np.floor(h / spacing + 1 + 1e-9))
    xs = dem.origin[0] + np.minimum(np.arange(nx) * spacing, w)
    ys = dem.origin[1] + np.minimum(np.arange(ny) * spacing, h)
    gx, gy = np.meshgrid(xs, ys)
    gz = dem_elevation(dem, gx, gy)
    return PointCloud(np.column_stack([gx.ravel(), gy.ravel(), np.ravel(gz)]))


# --- file formats -----------------------------------------------------------

def write_dem_ascii(dem: Dem, path) -> None:
    """Write an ESRI-style ASCII grid.

    Samples are cell centres, so ``xllcorner = origin_x - cell/2``.  The first
    data row is the northern edge.
    """
    cs = dem.cell_size
    lines = [
        f"ncols {dem.n_cols}",
        f"nrows {dem.n_rows}",
        f"xllcorner {dem.origin[0] - cs / 2!r}",
        f"yllcorner {dem.origin[1] - cs / 2!r}",
        f"cellsize {cs!r}",
    ]
    for row in dem.elevations[::-1]:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dem_ascii(path) -> Dem:
    header = {}
    values = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0][0].isalpha():
                header[parts[0].lower()] = float(parts[1])
            else:
                values.extend(float(p) for p in parts)
    try:
        ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    except KeyError as exc:
        raise RejectedInput(f"missing DEM header field {exc}") from None
    if "xllcenter" in header:
        ox, oy = header["xllcenter"], header["yllcenter"]
    else:
        ox, oy = header["xllcorner"] + cs / 2, header["yllcorner"] + cs / 2
    if len(values) != ncols * nrows:
        raise RejectedInput(f"expected {ncols * nrows} elevations, found {len(values)}")
    z = np.array(values).reshape(nrows, ncols)[::-1]
    nodata = header.get("nodata_value")
    if nodata is not None and np.any(z == nodata):
        raise RejectedInput("DEM contains nodata cells")
    return Dem((ox, oy), cs, z)


def write_xyz(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, fmt="%.17g")


def read_xyz(path) -> PointCloud:
    pts = np.loadtxt(path, dtype=float, ndmin=2)
    if pts.size and pts.shape[1] != 3:
        raise RejectedInput("point file rows must have exactly 3 columns")
    return PointCloud(pts)
