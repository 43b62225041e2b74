"""Planner tuning parameters: the seven-value parameter set, the 20 published sets, and the sampler."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RejectedInput

FIELD_NAMES = ("r_bi_exp", "k", "r_star_exp", "alpha", "n_avg_max", "delta_max", "delta_min")


@dataclass(frozen=True)
class ParameterSet:
    r_bi_exp: float    # Bi-RRT expansion radius (m)
    k: float           # RRT* near radius = k * start-goal distance
    r_star_exp: float  # RRT* expansion radius (m)
    alpha: float       # weight of the newest vertex count in the density average
    n_avg_max: float   # density average that ends RRT*
    delta_max: float   # initial lateral offset of the trajectory optimiser (m)
    delta_min: float   # final lateral offset (m)
    name: str = ""

    def __post_init__(self):
        for f in FIELD_NAMES:
            v = getattr(self, f)
            if not (np.isfinite(v) and v > 0):
                raise RejectedInput(f"{f} must be positive, got {v}")
        if self.delta_min > self.delta_max:
            raise RejectedInput("delta_min must not exceed delta_max")

    def values(self):
        return tuple(float(getattr(self, f)) for f in FIELD_NAMES)

    def to_dict(self):
        d = {f: float(getattr(self, f)) for f in FIELD_NAMES}
        d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(*(float(d[f]) for f in FIELD_NAMES), name=str(d.get("name", "")))


_BUILTIN_ROWS = [
    (0.50, 0.14, 0.18, 0.19, 43.57, 0.57, 0.09),
    (1.56, 0.02, 0.08, 0.30, 34.21, 0.22, 0.06),
    (1.84, 0.21, 0.09, 0.76, 28.40, 0.18, 0.03),
    (0.51, 0.09, 0.04, 0.03, 25.09, 0.96, 0.08),
    (1.94, 0.11, 0.12, 0.59, 43.03, 0.77, 0.06),
    (2.56, 0.11, 0.07, 0.20, 64.48, 0.29, 0.03),
    (2.38, 0.05, 0.04, 0.47, 31.84, 0.30, 0.10),
    (0.82, 0.08, 0.05, 0.26, 67.24, 0.24, 0.05),
    (0.97, 0.09, 0.16, 0.12, 85.46, 0.22, 0.04),
    (0.58, 0.06, 0.15, 0.19, 15.40, 0.15, 0.04),
    (1.37, 0.08, 0.21, 0.49, 77.92, 0.80, 0.08),
    (1.01, 0.12, 0.14, 0.57, 69.86, 0.91, 0.06),
    (0.87, 0.12, 0.09, 0.49, 52.47, 0.83, 0.07),
    (2.83, 0.04, 0.01, 0.11, 98.29, 0.05, 0.02),
    (1.23, 0.14, 0.13, 0.07, 14.64, 0.24, 0.03),
    (1.17, 0.02, 0.07, 0.35, 64.91, 0.18, 0.02),
    (1.81, 0.13, 0.12, 0.38, 28.36, 0.29, 0.10),
    (0.24, 0.16, 0.19, 0.38, 8.23, 0.36, 0.03),
    (0.65, 0.26, 0.05, 0.26, 62.99, 0.41, 0.03),
    (2.20, 0.11, 0.05, 0.77, 89.22, 0.77, 0.04),
]


def builtin_parameter_sets():
    """PS1..PS20 as published, in order."""
    return [ParameterSet(*row, name=f"PS{i}") for i, row in enumerate(_BUILTIN_ROWS, start=1)]


def builtin(name_or_index) -> ParameterSet:
    sets = builtin_parameter_sets()
    if isinstance(name_or_index, str):
        key = name_or_index.upper()
        key = key if key.startswith("PS") else f"PS{key}"
        for ps in sets:
            if ps.name == key:
                return ps
        raise RejectedInput(f"no built-in parameter set {name_or_index!r}")
    return sets[int(name_or_index) - 1]


def _positive_gauss(rng, mu, sigma, upper=np.inf):
    while True:
        v = rng.normal(mu, sigma)
        if 0 < v < upper:
            return float(v)


def sample_parameter_set(rng, name: str = "") -> ParameterSet:
    """Draw one parameter set from the experiment's sampling distributions.

    Gaussian parameters are truncated by rejection, not clipping; alpha is
    additionally kept below 1.  The offset pair is redrawn until
    ``delta_min < delta_max``.
    """
    r_bi = float(rng.uniform(0.03, 3.0))
    k = _positive_gauss(rng, 0.1, 0.1)
    r_star = _positive_gauss(rng, 0.1, 0.1)
    alpha = _positive_gauss(rng, 0.25, 0.25, upper=1.0)
    n_avg = float(rng.uniform(5.0, 100.0))
    while True:
        d_max = float(rng.uniform(0.01, 1.0))
        d_min = float(rng.uniform(0.001, 0.1))
        if d_min < d_max:
            break
    return ParameterSet(r_bi, k, r_star, alpha, n_avg, d_max, d_min, name=name)
