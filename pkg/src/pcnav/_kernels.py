"""Numba kernels for the hot loops (plane fits, lattice dynamic programming)."""
import numpy as np
from numba import njit


@njit(cache=True)
def plane_fit(pts):
    """Return ``(centroid, normal, eigenvalues)`` of the covariance of ``pts``.

    ``normal`` is the smallest-eigenvalue eigenvector with ``normal[2] >= 0``.
    """
    n = pts.shape[0]
    c = np.zeros(3)
    for i in range(n):
        for k in range(3):
            c[k] += pts[i, k]
    c /= n
    cov = np.zeros((3, 3))
    for i in range(n):
        d0 = pts[i, 0] - c[0]
        d1 = pts[i, 1] - c[1]
        d2 = pts[i, 2] - c[2]
        cov[0, 0] += d0 * d0
        cov[0, 1] += d0 * d1
        cov[0, 2] += d0 * d2
        cov[1, 1] += d1 * d1
        cov[1, 2] += d1 * d2
        cov[2, 2] += d2 * d2
    cov[1, 0] = cov[0, 1]
    cov[2, 0] = cov[0, 2]
    cov[2, 1] = cov[1, 2]
    cov /= n
    w, v = np.linalg.eigh(cov)
    nrm = v[:, 0].copy()
    if nrm[2] < 0 or (nrm[2] == 0 and (nrm[1] < 0 or (nrm[1] == 0 and nrm[0] < 0))):
        nrm = -nrm
    nrm /= np.sqrt(nrm[0] ** 2 + nrm[1] ** 2 + nrm[2] ** 2)
    return c, nrm, w


@njit(cache=True)
def bucket_sort(xy, x0, y0, h, nx, ny):
    """CSR layout of points bucketed on an ``nx`` by ``ny`` grid of cell size ``h``."""
    n = xy.shape[0]
    cell = np.empty(n, dtype=np.int64)
    counts = np.zeros(nx * ny + 1, dtype=np.int64)
    for i in range(n):
        cx = min(max(int((xy[i, 0] - x0) / h), 0), nx - 1)
        cy = min(max(int((xy[i, 1] - y0) / h), 0), ny - 1)
        cell[i] = cy * nx + cx
        counts[cell[i] + 1] += 1
    for c in range(nx * ny):
        counts[c + 1] += counts[c]
    order = np.empty(n, dtype=np.int64)
    fill = counts[:-1].copy()
    for i in range(n):
        order[fill[cell[i]]] = i
        fill[cell[i]] += 1
    return counts, order


@njit(cache=True)
def bucket_ball(pts, starts, order, x0, y0, h, nx, ny, cx, cy, cz, r):
    """Sorted indices of points within 3D distance ``r`` of ``(cx, cy, cz)``."""
    # a hair of slack in cell units so rounding never drops a boundary hit
    ix0 = max(int(np.floor((cx - r - x0) / h - 1e-9)), 0)
    ix1 = min(int(np.floor((cx + r - x0) / h + 1e-9)), nx - 1)
    iy0 = max(int(np.floor((cy - r - y0) / h - 1e-9)), 0)
    iy1 = min(int(np.floor((cy + r - y0) / h + 1e-9)), ny - 1)
    out = np.empty(64, dtype=np.int64)
    m = 0
    for iy in range(iy0, iy1 + 1):
        for ix in range(ix0, ix1 + 1):
            c = iy * nx + ix
            for t in range(starts[c], starts[c + 1]):
                i = order[t]
                dx = pts[i, 0] - cx
                dy = pts[i, 1] - cy
                dz = pts[i, 2] - cz
                if np.sqrt(dx * dx + dy * dy + dz * dz) <= r:
                    if m == out.shape[0]:
                        grown = np.empty(2 * m, dtype=np.int64)
                        grown[:m] = out
                        out = grown
                    out[m] = i
                    m += 1
    res = out[:m].copy()
    res.sort()
    return res


@njit(cache=True)
def bucket_nearest_xy(pts, starts, order, x0, y0, h, nx, ny, qx, qy):
    """Index of the point nearest to ``(qx, qy)`` in the plane (lowest index on ties)."""
    kx = min(max(int(np.floor((qx - x0) / h)), 0), nx - 1)
    ky = min(max(int(np.floor((qy - y0) / h)), 0), ny - 1)
    best = -1
    bestd = np.inf
    ring = 0
    maxring = max(nx, ny)
    while ring <= maxring:
        for iy in range(max(ky - ring, 0), min(ky + ring, ny - 1) + 1):
            edge_row = iy == ky - ring or iy == ky + ring
            step = 1 if edge_row else 2 * ring
            ix = max(kx - ring, 0) if edge_row else kx - ring
            while ix <= min(kx + ring, nx - 1):
                if ix >= 0:
                    c = iy * nx + ix
                    for t in range(starts[c], starts[c + 1]):
                        i = order[t]
                        dx = pts[i, 0] - qx
                        dy = pts[i, 1] - qy
                        d = dx * dx + dy * dy
                        if d < bestd or (d == bestd and i < best):
                            bestd = d
                            best = i
                if step == 0:
                    break
                ix += step
        # every unvisited cell is at least ring*h away from the query
        if best >= 0:
            gap_x = min(qx - (x0 + (kx - ring) * h), x0 + (kx + ring + 1) * h - qx)
            gap_y = min(qy - (y0 + (ky - ring) * h), y0 + (ky + ring + 1) * h - qy)
            gap = min(gap_x, gap_y)
            if gap > 0 and gap * gap > bestd:
                break
        ring += 1
    return best


@njit(cache=True)
def nearest2d(xy, n, x, y):
    best = 0
    bestd = np.inf
    for i in range(n):
        dx = xy[i, 0] - x
        dy = xy[i, 1] - y
        d = dx * dx + dy * dy
        if d < bestd:
            bestd = d
            best = i
    return best, np.sqrt(bestd)


@njit(cache=True)
def within2d(xy, n, x, y, r):
    out = np.empty(n, dtype=np.int64)
    m = 0
    r2 = r * r
    for i in range(n):
        dx = xy[i, 0] - x
        dy = xy[i, 1] - y
        if dx * dx + dy * dy <= r2:
            out[m] = i
            m += 1
    return out[:m]


@njit(cache=True)
def count_within2d(xy, n, x, y, r):
    m = 0
    r2 = r * r
    for i in range(n):
        dx = xy[i, 0] - x
        dy = xy[i, 1] - y
        if dx * dx + dy * dy <= r2:
            m += 1
    return m


@njit(cache=True)
def menger_curvature(ax, ay, bx, by, cx, cy):
    """Curvature of the circle through three plan-view points (0 if degenerate)."""
    ab = np.hypot(bx - ax, by - ay)
    bc = np.hypot(cx - bx, cy - by)
    ca = np.hypot(ax - cx, ay - cy)
    den = ab * bc * ca
    if den <= 1e-300:
        return 0.0
    cross = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return 2.0 * abs(cross) / den


@njit(cache=True)
def _edge(pts, t, j, k):
    d0 = pts[t + 1, k, 0] - pts[t, j, 0]
    d1 = pts[t + 1, k, 1] - pts[t, j, 1]
    d2 = pts[t + 1, k, 2] - pts[t, j, 2]
    return np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)


@njit(cache=True)
def route_cost(pts, rough, route, w_len, w_curv, w_rough):
    """Objective of one route through the lattice."""
    n = route.shape[0]
    c = 0.0
    for t in range(n):
        c += w_rough * rough[t, route[t]]
    for t in range(n - 1):
        c += w_len * _edge(pts, t, route[t], route[t + 1])
    for t in range(1, n - 1):
        a = pts[t - 1, route[t - 1]]
        b = pts[t, route[t]]
        d = pts[t + 1, route[t + 1]]
        c += w_curv * menger_curvature(a[0], a[1], b[0], b[1], d[0], d[1])
    return c


@njit(cache=True)
def _curv(pts, t, i, j, k):
    return menger_curvature(pts[t - 1, i, 0], pts[t - 1, i, 1], pts[t, j, 0], pts[t, j, 1],
                            pts[t + 1, k, 0], pts[t + 1, k, 1])


@njit(cache=True)
def refresh_tables(pts, E, C, lo, hi):
    """Recompute edge lengths ``E[t]`` for t in [lo, hi) and curvatures ``C[t]`` for t in [lo, hi]."""
    n, K = pts.shape[0], pts.shape[1]
    for t in range(max(lo, 0), min(hi, n - 1)):
        for j in range(K):
            for k in range(K):
                E[t, j, k] = _edge(pts, t, j, k)
    for t in range(max(lo, 1), min(hi + 1, n - 1)):
        for i in range(K):
            for j in range(K):
                for k in range(K):
                    C[t, i, j, k] = _curv(pts, t, i, j, k)


@njit(cache=True)
def lattice_tables(pts):
    """Edge-length table ``E (n-1, K, K)`` and curvature table ``C (n, K, K, K)`` of a lattice."""
    n, K = pts.shape[0], pts.shape[1]
    E = np.zeros((max(n - 1, 0), K, K))
    C = np.zeros((n, K, K, K))
    refresh_tables(pts, E, C, 0, n)
    return E, C


@njit(cache=True)
def lattice_dp_tables(E, C, rough, valid, w_len, w_curv, w_rough):
    """Minimum-cost route through a lattice given precomputed edge and curvature tables.

    The cost couples consecutive triples through curvature, so the DP state
    is the pair (subvertex in column t-1, subvertex in column t).  Ties go to
    the lowest subvertex index.
    """
    n, K = valid.shape
    route = np.zeros(n, dtype=np.int64)
    if n == 1:
        return route, w_rough * rough[0, 0]
    INF = np.inf
    # D[t, i, j]: best cost of a prefix ending with (i at t-1, j at t)
    D = np.full((n, K, K), INF)
    B = np.zeros((n, K, K), dtype=np.int64)
    for i in range(K):
        if not valid[0, i]:
            continue
        for j in range(K):
            if valid[1, j]:
                D[1, i, j] = (w_rough * (rough[0, i] + rough[1, j]) + w_len * E[0, i, j])
    for t in range(1, n - 1):
        for j in range(K):
            if not valid[t, j]:
                continue
            for k in range(K):
                if not valid[t + 1, k]:
                    continue
                step = w_len * E[t, j, k] + w_rough * rough[t + 1, k]
                best = INF
                arg = 0
                for i in range(K):
                    prev = D[t, i, j]
                    if prev == INF:
                        continue
                    v = prev + w_curv * C[t, i, j, k]
                    if v < best:
                        best = v
                        arg = i
                if best < INF:
                    D[t + 1, j, k] = best + step
                    B[t + 1, j, k] = arg
    best = INF
    bj = 0
    bk = 0
    for j in range(K):
        for k in range(K):
            if D[n - 1, j, k] < best:
                best = D[n - 1, j, k]
                bj = j
                bk = k
    route[n - 1] = bk
    route[n - 2] = bj
    for t in range(n - 1, 1, -1):
        route[t - 2] = B[t, route[t - 1], route[t]]
    return route, best


@njit(cache=True)
def lattice_dp(pts, rough, valid, w_len, w_curv, w_rough):
    """Minimum-cost route through a lattice of ``n`` columns of up to ``K`` subvertices."""
    E, C = lattice_tables(pts)
    return lattice_dp_tables(E, C, rough, valid, w_len, w_curv, w_rough)


@njit(cache=True)
def choose_parent(xyz, cost, cand, q0, qx, qy, qz):
    """Cheapest parent for point q among ``cand``; start from ``q0`` and only accept strict improvements."""
    d0 = xyz[q0, 0] - qx
    d1 = xyz[q0, 1] - qy
    d2 = xyz[q0, 2] - qz
    best = q0
    best_c = cost[q0] + np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    for c in cand:
        d0 = xyz[c, 0] - qx
        d1 = xyz[c, 1] - qy
        d2 = xyz[c, 2] - qz
        cc = cost[c] + np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if cc < best_c - 1e-12:
            best = c
            best_c = cc
    return best, best_c


@njit(cache=True)
def rewire_gain(xyz, cost, cand, v):
    """Candidates whose cost drops by more than 1e-12 when routed through vertex ``v``."""
    out = np.zeros(cand.shape[0], dtype=np.bool_)
    for m in range(cand.shape[0]):
        u = cand[m]
        d0 = xyz[u, 0] - xyz[v, 0]
        d1 = xyz[u, 1] - xyz[v, 1]
        d2 = xyz[u, 2] - xyz[v, 2]
        out[m] = cost[v] + np.sqrt(d0 * d0 + d1 * d1 + d2 * d2) < cost[u] - 1e-12
    return out


@njit(cache=True)
def nanmax_at(values, idx):
    """Largest non-NaN ``values[idx]``; 0.0 when all are NaN."""
    best = -np.inf
    for i in idx:
        v = values[i]
        if v == v and v > best:
            best = v
    return best if best > -np.inf else 0.0


@njit(cache=True)
def dem_footprint(elev, x0, y0, cs, stencil, x, y):
    """Bilinear DEM samples at ``(x, y) + stencil``, clamped to the grid extent."""
    nr, nc = elev.shape
    m = stencil.shape[0]
    out = np.empty((m, 3))
    xmax = x0 + (nc - 1) * cs
    ymax = y0 + (nr - 1) * cs
    for k in range(m):
        px = min(max(x + stencil[k, 0], x0), xmax)
        py = min(max(y + stencil[k, 1], y0), ymax)
        u = (px - x0) / cs
        v = (py - y0) / cs
        j = min(int(np.floor(u)), nc - 2)
        i = min(int(np.floor(v)), nr - 2)
        fu = u - j
        fv = v - i
        out[k, 0] = px
        out[k, 1] = py
        out[k, 2] = (elev[i, j] * (1 - fu) * (1 - fv) + elev[i, j + 1] * fu * (1 - fv)
                     + elev[i + 1, j] * (1 - fu) * fv + elev[i + 1, j + 1] * fu * fv)
    return out


@njit(cache=True)
def track_point(xy, cum, seg_len, s):
    n = seg_len.shape[0]
    if n == 0:
        return xy[0, 0], xy[0, 1]
    s = min(max(s, 0.0), cum[n])
    i = np.searchsorted(cum, s, side="right") - 1
    i = min(max(i, 0), n - 1)
    f = (s - cum[i]) / seg_len[i] if seg_len[i] > 0 else 0.0
    return xy[i, 0] + f * (xy[i + 1, 0] - xy[i, 0]), xy[i, 1] + f * (xy[i + 1, 1] - xy[i, 1])


@njit(cache=True)
def track_project(xy, cum, seg_len, x, y, s_min, s_max):
    """Arc length of the polyline point nearest ``(x, y)`` among arc lengths in [s_min, s_max]."""
    n = seg_len.shape[0]
    if n == 0:
        return 0.0
    lo = min(max(0, np.searchsorted(cum, s_min, side="right") - 1), n - 1)
    hi = min(n, np.searchsorted(cum, s_max, side="right"))
    hi = max(hi, lo + 1)
    smax = min(s_max, cum[n])
    best_s = 0.0
    best_d = np.inf
    for i in range(lo, hi):
        ll = seg_len[i]
        u = 0.0
        if ll > 0:
            dx = xy[i + 1, 0] - xy[i, 0]
            dy = xy[i + 1, 1] - xy[i, 1]
            u = ((x - xy[i, 0]) * dx + (y - xy[i, 1]) * dy) / (ll * ll)
            u = min(max(u, 0.0), 1.0)
        s = min(max(cum[i] + u * ll, s_min), smax)
        px, py = track_point(xy, cum, seg_len, s)
        d = (px - x) ** 2 + (py - y) ** 2
        if d < best_d:
            best_d = d
            best_s = s
    return best_s
