"""Statistics over trial records: population summaries, mission/PS ranks, exponential fits,
normalised histograms, path heatmaps and Spearman partial correlations.

Conventions: quantiles use linear interpolation between order statistics
(type 7).  TPL and delta-x statistics use successful trials only; planning
time uses every trial whose planner returned a path.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import Collinearity, DegenerateFit, EmptyPopulation, RejectedInput
from .params import FIELD_NAMES

FILTER_FIELDS = ("terrain_id", "mission_id", "ps_id")
METRICS = ("SR", "dx_median", "dx_iqr", "pt_median", "pt_iqr")


# --- quantiles -------------------------------------------------------------

def quantile(values, q: float) -> float:
    """Type-7 quantile: ``x[lo] + (h - lo) * (x[lo+1] - x[lo])`` with ``h = (n-1) q``.

    Order statistics are found by selection rather than a full sort.
    """
    x = np.asarray(values, dtype=float).ravel()
    if len(x) == 0:
        raise EmptyPopulation("quantile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise RejectedInput("q must lie in [0, 1]")
    h = (len(x) - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, len(x) - 1)
    part = np.partition(x, (lo, hi))
    a, b = part[lo], part[hi]
    return float(a + (h - lo) * (b - a))


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    @classmethod
    def of(cls, values):
        x = np.asarray(values, dtype=float)
        if len(x) == 0:
            nan = float("nan")
            return cls(0, nan, nan, nan, nan, nan, nan)
        return cls(len(x), float(x.mean()), quantile(x, 0.5), quantile(x, 0.25), quantile(x, 0.75),
                   float(x.min()), float(x.max()))

    def to_dict(self):
        return {"n": self.n, "mean": self.mean, "median": self.median, "iqr": self.iqr,
                "q1": self.q1, "q3": self.q3, "min": self.min, "max": self.max}


# --- population slices -----------------------------------------------------

@dataclass(frozen=True)
class PopulationFilter:
    """Include/exclude sets per label.  Empty include means "everything".

    Mission values may be bare (``M2``, any terrain) or qualified (``T1:M2``).
    """

    include: dict = field(default_factory=dict)
    exclude: dict = field(default_factory=dict)

    def __post_init__(self):
        inc = {k: frozenset(v) for k, v in self.include.items() if v}
        exc = {k: frozenset(v) for k, v in self.exclude.items() if v}
        for k in list(inc) + list(exc):
            if k not in FILTER_FIELDS:
                raise RejectedInput(f"cannot filter on {k!r}; use one of {FILTER_FIELDS}")
        for k in inc.keys() & exc.keys():
            if inc[k] & exc[k]:
                raise RejectedInput(f"{k}: {sorted(inc[k] & exc[k])} both included and excluded")
        object.__setattr__(self, "include", inc)
        object.__setattr__(self, "exclude", exc)

    @staticmethod
    def _labels(rec, key):
        v = getattr(rec, key)
        return (v, f"{rec.terrain_id}:{v}") if key == "mission_id" else (v,)

    def __call__(self, rec) -> bool:
        for k, allowed in self.include.items():
            if not any(v in allowed for v in self._labels(rec, k)):
                return False
        for k, banned in self.exclude.items():
            if any(v in banned for v in self._labels(rec, k)):
                return False
        return True

    def apply(self, records):
        return [r for r in records if self(r)]

    @classmethod
    def parse(cls, expr: str):
        """``"terrain_id=T1|T2,mission_id!=T1:M2"`` style expressions; empty means no filter."""
        inc, exc = defaultdict(set), defaultdict(set)
        for clause in filter(None, (c.strip() for c in (expr or "").split(","))):
            if "!=" in clause:
                key, vals = clause.split("!=", 1)
                target = exc
            elif "=" in clause:
                key, vals = clause.split("=", 1)
                target = inc
            else:
                raise RejectedInput(f"bad filter clause {clause!r}")
            key = key.strip()
            key = {"terrain": "terrain_id", "mission": "mission_id", "ps": "ps_id"}.get(key, key)
            target[key].update(v.strip() for v in vals.split("|") if v.strip())
        return cls(dict(inc), dict(exc))


@dataclass(frozen=True)
class PopulationStats:
    n: int
    successes: int
    delta_x: Summary
    tpl: Summary
    planning_time: Summary  # seconds

    @property
    def sr(self) -> float:
        return self.successes / self.n

    @property
    def fr(self) -> float:
        return 1.0 - self.sr

    def to_dict(self):
        return {"n": self.n, "successes": self.successes, "SR": self.sr, "FR": self.fr,
                "delta_x": self.delta_x.to_dict(), "tpl": self.tpl.to_dict(),
                "planning_time": self.planning_time.to_dict()}


def population_stats(records, filter: PopulationFilter = None, integer_pt: bool = False) -> PopulationStats:
    """SR/FR plus delta-x, TPL and planning-time summaries over a record slice.

    ``integer_pt`` reports planning time from the whole-second column instead
    of the raw millisecond one.
    """
    rs = records if filter is None else filter.apply(records)
    if not rs:
        raise EmptyPopulation("no records in this population")
    ok = [r for r in rs if r.success]
    planned = [r for r in rs if r.planned]
    pt = [float(r.pt_s) if integer_pt else r.pt_ms / 1000.0 for r in planned]
    return PopulationStats(len(rs), len(ok), Summary.of([r.dx_m for r in ok]),
                           Summary.of([r.tpl_m for r in ok]), Summary.of(pt))


def rank(fr: float, dx_med: float, dx_iqr: float, euclid: float) -> float:
    """Score in which failure rate and normalised excess path length (median and spread) count against."""
    if not euclid > 0:
        raise RejectedInput("euclid must be positive")
    return 1.0 - fr - dx_med / euclid - dx_iqr / euclid


def rank_population(stats: PopulationStats, euclid: float) -> float:
    return rank(stats.fr, stats.delta_x.median, stats.delta_x.iqr, euclid)


# --- exponential fit -------------------------------------------------------

@dataclass(frozen=True)
class ExponentialFit:
    rate: float
    n: int
    ks: float  # sup-distance between the empirical CDF and the fitted CDF

    @property
    def scale(self) -> float:
        return 1.0 / self.rate

    def cdf(self, x):
        return 1.0 - np.exp(-self.rate * np.maximum(np.asarray(x, dtype=float), 0.0))


def ks_statistic(samples, cdf) -> float:
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    f = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def fit_exponential(samples) -> ExponentialFit:
    """Maximum-likelihood exponential fit: rate = 1 / sample mean."""
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 2:
        raise RejectedInput("need at least two samples")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise RejectedInput("samples must be finite and non-negative")
    mean = float(x.mean())
    if not mean > 0:
        raise DegenerateFit("sample mean is zero")
    fit = ExponentialFit(1.0 / mean, len(x), 0.0)
    return ExponentialFit(fit.rate, len(x), ks_statistic(x, fit.cdf))


# --- histograms and heatmaps -----------------------------------------------

def histogram_normalized(samples, bin_width: float, origin: float = None):
    """``(edges, density)`` with bins of ``bin_width`` and ``sum(density) * bin_width == 1``.

    Bins are aligned to multiples of ``bin_width`` (offset by ``origin`` when given).
    """
    if not bin_width > 0:
        raise RejectedInput("bin_width must be positive")
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) == 0:
        raise EmptyPopulation("histogram of an empty sample")
    off = 0.0 if origin is None else float(origin)
    k0 = math.floor((x.min() - off) / bin_width)
    k1 = math.floor((x.max() - off) / bin_width)
    # the division can land one bin off either way; settle on the products
    while off + bin_width * k0 > x.min():
        k0 -= 1
    while off + bin_width * (k1 + 1) <= x.max():
        k1 += 1
    edges = off + bin_width * np.arange(k0, k1 + 2)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return edges, counts / (len(x) * bin_width)


@dataclass(frozen=True)
class Heatmap:
    """Waypoint counts in the mission frame; row ``i`` is centred on ``y = (i - half) * res``."""

    counts: np.ndarray
    x0: float
    res: float

    @property
    def half(self) -> int:
        return self.counts.shape[0] // 2

    @property
    def x_edges(self):
        return self.x0 + self.res * np.arange(self.counts.shape[1] + 1)

    @property
    def y_edges(self):
        return self.res * (np.arange(self.counts.shape[0] + 1) - self.half - 0.5)


def to_mission_frame(xy, start, goal) -> np.ndarray:
    """Rotate/translate plan-view points so the start is the origin and the goal lies on +x."""
    xy = np.asarray(xy, dtype=float)[:, :2]
    th = math.atan2(goal[1] - start[1], goal[0] - start[0])
    c, s = math.cos(th), math.sin(th)
    d = xy - np.asarray(start, dtype=float)
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def path_heatmap(paths, mission, grid_res: float, x_range=None, half_width=None) -> Heatmap:
    """Bin every waypoint of ``paths`` on a grid in ``mission``'s frame.

    The grid covers all waypoints unless ``x_range``/``half_width`` are given,
    in which case outliers are clamped into the border cells.  Rows are
    symmetric about the start-goal axis.
    """
    if not grid_res > 0:
        raise RejectedInput("grid_res must be positive")
    pts = []
    for p in paths:
        xy = np.array([w.position[:2] for w in p.waypoints]) if hasattr(p, "waypoints") else np.asarray(p)
        if len(xy):
            pts.append(to_mission_frame(xy, mission.start, mission.goal))
    pts = np.vstack(pts) if pts else np.zeros((0, 2))
    if x_range is None:
        lo = min(0.0, pts[:, 0].min()) if len(pts) else 0.0
        hi = max(mission.euclid, pts[:, 0].max()) if len(pts) else mission.euclid
        x_range = (math.floor(lo / grid_res) * grid_res, hi)
    if half_width is None:
        half_width = float(np.abs(pts[:, 1]).max()) if len(pts) else 0.0
    x0 = float(x_range[0])
    nx = int(math.floor((x_range[1] - x0) / grid_res)) + 1
    half = int(math.floor(half_width / grid_res + 0.5))
    counts = np.zeros((2 * half + 1, nx), dtype=np.int64)
    if len(pts):
        ix = np.clip(np.floor((pts[:, 0] - x0) / grid_res).astype(np.int64), 0, nx - 1)
        iy = np.floor(np.abs(pts[:, 1]) / grid_res + 0.5).astype(np.int64)
        iy = np.clip(np.sign(pts[:, 1]).astype(np.int64) * iy, -half, half) + half
        np.add.at(counts, (iy, ix), 1)
    return Heatmap(counts, x0, float(grid_res))


# --- correlations ----------------------------------------------------------

def rank_columns(obs) -> np.ndarray:
    """Average ranks per column (ties share the mean of their positions)."""
    return np.column_stack([rankdata(c) for c in np.asarray(obs, dtype=float).T])


def spearman_partial(observations, columns=None) -> np.ndarray:
    """Partial Spearman coefficients of each parameter column with the last (metric) column.

    Ranks every column, forms the Pearson correlation of the ranks, inverts
    it and reads ``-P[j, y] / sqrt(P[j, j] P[y, y])``.
    """
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[1] < 2:
        raise RejectedInput("observations must be an n x (p+1) matrix")
    n, m = obs.shape
    p = m - 1
    names = list(columns) if columns is not None else [f"col{j}" for j in range(m)]
    if len(names) != m:
        raise RejectedInput("one name per column is required")
    if n <= p + 1:
        raise RejectedInput(f"need more than {p + 1} observations, got {n}")
    if not np.all(np.isfinite(obs)):
        raise RejectedInput("observations must be finite")
    const = [names[j] for j in range(m) if np.all(obs[:, j] == obs[0, j])]
    if const:
        raise Collinearity(f"constant column(s): {', '.join(const)}", const)
    ranks = rank_columns(obs)
    r = np.corrcoef(ranks, rowvar=False)
    w, v = np.linalg.eigh(r[:p, :p])
    if w[0] < 1e-10 * w[-1]:
        culprit = [names[j] for j in np.flatnonzero(np.abs(v[:, 0]) > 0.1)]
        raise Collinearity(f"parameter rank correlations are singular; involved columns: {', '.join(culprit)}",
                           culprit)
    if np.linalg.eigvalsh(r)[0] >= 1e-10 * p:
        prec = np.linalg.inv(r)
        return -prec[:p, p] / np.sqrt(np.diag(prec)[:p] * prec[p, p])
    # the metric's ranks are an exact combination of the parameter ranks: fall back to
    # residualising on the other parameters, reading 0/0 as no partial association
    return _partial_by_residuals(ranks, p)


def _partial_by_residuals(ranks, p):
    n = len(ranks)
    y = ranks[:, p]
    out = np.zeros(p)
    for j in range(p):
        z = np.column_stack([np.ones(n), np.delete(ranks[:, :p], j, axis=1)])
        ex = ranks[:, j] - z @ np.linalg.lstsq(z, ranks[:, j], rcond=None)[0]
        ey = y - z @ np.linalg.lstsq(z, y, rcond=None)[0]
        nx, ny = float(np.sqrt(ex @ ex)), float(np.sqrt(ey @ ey))
        if ny > 1e-9 * n and nx > 0:
            out[j] = float(np.clip(ex @ ey / (nx * ny), -1.0, 1.0))
    return out


@dataclass(frozen=True)
class CorrelationReport:
    parameters: tuple
    metrics: tuple
    matrix: np.ndarray   # len(parameters) x len(metrics)
    n: dict              # observations used per metric

    def coefficient(self, parameter: str, metric: str) -> float:
        return float(self.matrix[self.parameters.index(parameter), self.metrics.index(metric)])

    def rows(self):
        yield ("parameter",) + self.metrics
        for i, name in enumerate(self.parameters):
            yield (name,) + tuple(float(v) for v in self.matrix[i])


def per_ps_metrics(records) -> dict:
    """``{ps_id: {metric: value}}`` with SR, delta-x median/IQR (successes) and PT median/IQR."""
    groups = defaultdict(list)
    for r in records:
        groups[r.ps_id].append(r)
    out = {}
    for ps_id, rs in groups.items():
        st = population_stats(rs)
        out[ps_id] = {"SR": st.sr, "dx_median": st.delta_x.median, "dx_iqr": st.delta_x.iqr,
                      "pt_median": st.planning_time.median, "pt_iqr": st.planning_time.iqr}
    return out


def correlation_report(records, parameter_sets, aggregation: str = "per_ps") -> CorrelationReport:
    """Spearman partial correlation of each planner parameter with each performance metric.

    ``per_ps`` (default) has one observation per parameter set; ``per_trial``
    uses each trial with metrics success / delta-x / planning time.  A metric
    that takes one value throughout gets NaN coefficients.
    """
    table = {ps.name: ps.values() for ps in parameter_sets}
    if aggregation == "per_ps":
        agg = {k: v for k, v in per_ps_metrics(records).items() if k in table}
        if len(agg) < 10:
            raise RejectedInput(f"need records for at least 10 parameter sets, got {len(agg)}")
        ids = sorted(agg)
        metrics = METRICS
        rows = {m: [(table[i], agg[i][m]) for i in ids] for m in metrics}
    elif aggregation == "per_trial":
        metrics = ("success", "dx", "pt")
        rs = [r for r in records if r.ps_id in table]
        rows = {"success": [(table[r.ps_id], float(r.success)) for r in rs],
                "dx": [(table[r.ps_id], r.dx_m) for r in rs if r.success],
                "pt": [(table[r.ps_id], r.pt_ms) for r in rs if r.planned]}
    else:
        raise RejectedInput(f"unknown aggregation {aggregation!r}")
    mat = np.full((len(FIELD_NAMES), len(metrics)), np.nan)
    counts = {}
    for j, m in enumerate(metrics):
        data = [list(x) + [y] for x, y in rows[m] if np.isfinite(y)]
        counts[m] = len(data)
        if len(data) and len({d[-1] for d in data}) == 1:
            continue  # a metric that never varies has no partial correlation; leave NaN
        mat[:, j] = spearman_partial(np.array(data), columns=list(FIELD_NAMES) + [m])
    return CorrelationReport(tuple(FIELD_NAMES), tuple(metrics), mat, counts)
