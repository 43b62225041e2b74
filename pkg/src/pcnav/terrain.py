"""Fractal terrain synthesis, roughness categories and mission sampling."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InfeasibleMission, RejectedInput
from .geometry import Dem

LOW, SEMI, HIGH = 0, 1, 2
CATEGORY_NAMES = {LOW: "Low", SEMI: "Semi", HIGH: "High"}

DEFAULT_T_LOW = 0.15
DEFAULT_T_HIGH = 0.35


@dataclass(frozen=True)
class TerrainConfig:
    """Parameters of a Weierstrass-Mandelbrot style octave sum.

    Octave ``n`` contributes ``n_ridges`` plane cosines of amplitude
    ``amplitude * lacunarity**((fractal_coeff - 3) * n) / sqrt(n_ridges)`` at
    wavenumber ``lacunarity**n * 2*pi/base_wavelength``.  With ``n_ridges=1``
    this is exactly one randomly oriented, randomly phased cosine per octave.
    """

    seed: int = 0
    fractal_coeff: float = 2.45
    extent: tuple = (100.0, 100.0)
    cell_size: float = 0.25
    amplitude: float = 1.53
    n_octaves: int = 5
    lacunarity: float = 2.0
    base_wavelength: float = 80.0
    n_ridges: int = 4

    def __post_init__(self):
        if not 2 < self.fractal_coeff < 3:
            raise RejectedInput("fractal_coeff must lie in (2, 3)")
        if self.n_octaves < 1 or self.n_ridges < 1:
            raise RejectedInput("n_octaves and n_ridges must be >= 1")
        if self.amplitude < 0:
            raise RejectedInput("amplitude must be >= 0")
        if not self.lacunarity > 1:
            raise RejectedInput("lacunarity must be > 1")
        if not (self.cell_size > 0 and self.base_wavelength > 0):
            raise RejectedInput("cell_size and base_wavelength must be positive")
        ex = tuple(float(e) for e in self.extent)
        if len(ex) != 2 or min(ex) < self.cell_size:
            raise RejectedInput("extent must be two lengths >= cell_size")
        object.__setattr__(self, "extent", ex)

    def to_dict(self):
        d = asdict(self)
        d["extent"] = list(self.extent)
        return d


def octave_terms(cfg: TerrainConfig):
    """Per-term ``(amplitude, wavenumber, direction, phase)`` arrays, in draw order."""
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.n_octaves, cfg.n_ridges)
    phi = rng.uniform(0.0, 2 * np.pi, size=shape)
    psi = rng.uniform(0.0, 2 * np.pi, size=shape)
    n = np.arange(cfg.n_octaves)[:, None]
    amp = np.broadcast_to(
        cfg.amplitude * cfg.lacunarity ** ((cfg.fractal_coeff - 3.0) * n) / np.sqrt(cfg.n_ridges), shape)
    k = np.broadcast_to(cfg.lacunarity ** n * (2 * np.pi / cfg.base_wavelength), shape)
    return amp.ravel(), k.ravel(), phi.ravel(), psi.ravel()


def wm_height(cfg: TerrainConfig, x, y):
    """Evaluate the octave sum directly at arbitrary points."""
    amp, k, phi, psi = octave_terms(cfg)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.zeros(np.broadcast(x, y).shape)
    for a, kk, ph, ps in zip(amp, k, phi, psi):
        z = z + a * np.cos(kk * (x * np.cos(ph) + y * np.sin(ph)) + ps)
    return z


def generate_dem(cfg: TerrainConfig) -> Dem:
    w, h = cfg.extent
    n_cols = int(round(w / cfg.cell_size)) + 1
    n_rows = int(round(h / cfg.cell_size)) + 1
    xs = np.arange(n_cols) * cfg.cell_size
    ys = np.arange(n_rows) * cfg.cell_size
    z = np.zeros((n_rows, n_cols))
    if cfg.amplitude > 0:
        z = wm_height(cfg, xs[None, :], ys[:, None])
    return Dem((0.0, 0.0), cfg.cell_size, z)


def dem_hash(dem: Dem) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(dem.origin, dtype="<f8").tobytes())
    h.update(np.float64(dem.cell_size).astype("<f8").tobytes())
    h.update(np.ascontiguousarray(dem.elevations, dtype="<f8").tobytes())
    return h.hexdigest()


def gradient_magnitude(dem: Dem) -> np.ndarray:
    gy, gx = np.gradient(dem.elevations, dem.cell_size)
    return np.hypot(gx, gy)


@dataclass(frozen=True)
class RoughnessGrid:
    categories: np.ndarray
    t_low: float
    t_high: float
    origin: tuple
    cell_size: float

    def category_at(self, x, y):
        """Category of the grid node nearest to ``(x, y)``."""
        j = np.clip(np.rint((np.asarray(x) - self.origin[0]) / self.cell_size).astype(int),
                    0, self.categories.shape[1] - 1)
        i = np.clip(np.rint((np.asarray(y) - self.origin[1]) / self.cell_size).astype(int),
                    0, self.categories.shape[0] - 1)
        return self.categories[i, j]

    def counts(self):
        return {name: int((self.categories == c).sum()) for c, name in CATEGORY_NAMES.items()}


def categorize_roughness(dem: Dem, t_low: float = DEFAULT_T_LOW,
                         t_high: float = DEFAULT_T_HIGH) -> RoughnessGrid:
    if not t_low < t_high:
        raise RejectedInput("t_low must be below t_high")
    g = gradient_magnitude(dem)
    cat = np.full(g.shape, HIGH, dtype=np.int8)
    cat[g < t_high] = SEMI
    cat[g < t_low] = LOW
    return RoughnessGrid(cat, float(t_low), float(t_high), dem.origin, dem.cell_size)


@dataclass(frozen=True)
class Mission:
    id: str
    start: tuple
    goal: tuple
    euclid: float

    def __post_init__(self):
        object.__setattr__(self, "start", (float(self.start[0]), float(self.start[1])))
        object.__setattr__(self, "goal", (float(self.goal[0]), float(self.goal[1])))
        d = float(np.hypot(self.goal[0] - self.start[0], self.goal[1] - self.start[1]))
        if abs(d - self.euclid) > 1e-6:
            raise RejectedInput(f"euclid {self.euclid} does not match start-goal distance {d}")

    @classmethod
    def between(cls, id, start, goal):
        return cls(id, start, goal, float(np.hypot(goal[0] - start[0], goal[1] - start[1])))

    def to_dict(self):
        return {"id": self.id, "start": list(self.start), "goal": list(self.goal), "euclid": self.euclid}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], tuple(d["start"]), tuple(d["goal"]), float(d["euclid"]))


def sample_mission(dem: Dem, grid: RoughnessGrid, euclid: float, rng, max_attempts: int = 10_000,
                   mission_id: str = "M", margin_frac: float = 0.05) -> Mission:
    """Rejection-sample a start in Low terrain and a goal in Low/Semi terrain.

    The goal sits exactly ``euclid`` from the start in a uniformly random
    direction; both stay ``margin_frac * euclid`` inside the DEM extent.
    """
    if not euclid > 0:
        raise RejectedInput("euclid must be positive")
    margin = margin_frac * euclid
    x0, y0, x1, y1 = dem.bounds
    if x1 - x0 <= 2 * margin or y1 - y0 <= 2 * margin:
        raise InfeasibleMission("extent too small for the required margin")
    for _ in range(max_attempts):
        sx = rng.uniform(x0 + margin, x1 - margin)
        sy = rng.uniform(y0 + margin, y1 - margin)
        theta = rng.uniform(0.0, 2 * np.pi)
        gx = sx + euclid * np.cos(theta)
        gy = sy + euclid * np.sin(theta)
        if not dem.contains(gx, gy, margin):
            continue
        if grid.category_at(sx, sy) != LOW:
            continue
        if grid.category_at(gx, gy) == HIGH:
            continue
        return Mission(mission_id, (sx, sy), (gx, gy), float(np.hypot(gx - sx, gy - sy)))
    raise InfeasibleMission(f"no valid start/goal pair after {max_attempts} attempts")
