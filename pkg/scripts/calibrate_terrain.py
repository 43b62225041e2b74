"""Sweep terrain amplitude / octave count and report straight-line vs planner success rates.

Example:
    python scripts/calibrate_terrain.py --baseline-only --amplitude 1.45 1.53 1.6 --terrains 20 --missions 40
"""
import argparse
import itertools
import time
from collections import Counter

import numpy as np

from pcnav.assessment import RobotSpec, point_roughness
from pcnav.errors import PcnavError
from pcnav.geometry import dem_to_pointcloud
from pcnav.params import builtin
from pcnav.planner import plan
from pcnav.rollout import failed_plan, rollout, straight_line_baseline
from pcnav.terrain import TerrainConfig, categorize_roughness, generate_dem, sample_mission


def run(amplitude, octaves, wavelength, fractal, n_terrains, n_missions, ps_name, with_planner=True):
    spec = RobotSpec()
    base, planned = Counter(), Counter()
    for t in range(n_terrains):
        cfg = TerrainConfig(seed=1000 + t, amplitude=amplitude, n_octaves=octaves,
                            base_wavelength=wavelength, fractal_coeff=fractal)
        dem = generate_dem(cfg)
        cloud = None
        if with_planner:
            cloud = dem_to_pointcloud(dem, 0.125)
            point_roughness(cloud, spec.normal_radius)
        grid = categorize_roughness(dem)
        rng = np.random.default_rng(t)
        for i in range(n_missions):
            m = sample_mission(dem, grid, 35.0, rng)
            base[straight_line_baseline(dem, cloud, m, spec).status.value] += 1
            if not with_planner:
                continue
            try:
                path, pt = plan(cloud, m, builtin(ps_name), spec, i)
                out = rollout(dem, cloud, path, m, spec, planning_time=pt)
            except PcnavError as exc:
                out = failed_plan(m, why=str(exc))
            planned[out.status.value] += 1
    return base, planned


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--amplitude", type=float, nargs="+", default=[1.53])
    ap.add_argument("--octaves", type=int, nargs="+", default=[5])
    ap.add_argument("--wavelength", type=float, nargs="+", default=[80.0])
    ap.add_argument("--fractal", type=float, default=2.45)
    ap.add_argument("--terrains", type=int, default=3)
    ap.add_argument("--missions", type=int, default=20)
    ap.add_argument("--ps", default="PS3")
    ap.add_argument("--baseline-only", action="store_true")
    args = ap.parse_args()
    for amp, octv, wl in itertools.product(args.amplitude, args.octaves, args.wavelength):
        t0 = time.time()
        base, planned = run(amp, octv, wl, args.fractal, args.terrains, args.missions, args.ps,
                            not args.baseline_only)
        n = sum(base.values())
        sr_b = base["Success"] / n
        line = f"amp={amp:<5} oct={octv} wl={wl:<5} D={args.fractal} baseline SR={sr_b:.3f}"
        if planned:
            sr_p = planned["Success"] / n
            line += f" planner SR={sr_p:.3f} gain={sr_p - sr_b:+.3f} {dict(planned)}"
        print(line + f" ({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
