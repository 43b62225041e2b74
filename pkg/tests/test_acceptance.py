"""Acceptance criteria, one test each.  Every test appends a PASS/FAIL line that the
terminal summary prints under "acceptance criteria"."""
import math
import time

import numpy as np
import pytest

from pcnav.analytics import (correlation_report, fit_exponential, population_stats, quantile, rank,
                             spearman_partial)
from pcnav.assessment import assess_waypoint, point_roughness, robot_profile, roughness_score
from pcnav.campaign import TrialRecord, file_sha256, paper_mini, run_campaign
from pcnav.cli import dispatch
from pcnav.errors import PcnavError
from pcnav.geometry import PointCloud, dem_to_pointcloud, fit_plane
from pcnav.params import builtin, builtin_parameter_sets
from pcnav.planner import birrt_plan, lattice_dp_tables, lattice_tables, near_radius, plan, rrtstar_refine
from pcnav.rollout import rollout, straight_line_baseline
from pcnav.terrain import TerrainConfig, categorize_roughness, generate_dem, sample_mission

import conftest
from test_analytics import residual_partial, sort_quantile
from test_assessment import pairwise_step
from test_geometry import eigen_normal
from test_planner import dijkstra_lattice

SPEC = robot_profile("sim")


def report(n, title, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def prepared(seed, fractal=2.45, n_missions=25, mission_seed=None):
    dem = generate_dem(TerrainConfig(seed=seed, fractal_coeff=fractal))
    cloud = dem_to_pointcloud(dem, 0.125)
    point_roughness(cloud, SPEC.normal_radius)
    grid = categorize_roughness(dem)
    rng = np.random.default_rng(seed if mission_seed is None else mission_seed)
    missions = [sample_mission(dem, grid, 35.0, rng, mission_id=f"M{i + 1}") for i in range(n_missions)]
    return dem, cloud, missions


@pytest.fixture(scope="session")
def mini_campaign(tmp_path_factory):
    out = tmp_path_factory.mktemp("paper_mini_a")
    t0 = time.perf_counter()
    recs = run_campaign(paper_mini(), out)
    return out, recs, time.perf_counter() - t0


# 1 ------------------------------------------------------------------------

def test_c01_rank_reproduction():
    r = rank(0.0805, 33.2, 18.6, 35)
    report(1, "rank reproduction", abs(r - (-0.56)) <= 0.005, f"rank = {r:.4f}, want -0.56 +- 0.005")


# 2 ------------------------------------------------------------------------

def test_c02_success_rate_arithmetic():
    recs = [TrialRecord("T", "M", "PS", i, 0, "Rollover" if i < 694 else "Success", 1.0, 1, 35.0, 0.0)
            for i in range(30_000)]
    st = population_stats(recs)
    ok = st.n == 30_000 and st.successes == 29_306 and round(st.sr, 3) == 0.977
    report(2, "SR arithmetic", ok, f"SR = {st.sr:.6f} -> {round(st.sr, 3)}, want 0.977")


# 3 ------------------------------------------------------------------------

def test_c03_planner_validity():
    t0 = time.perf_counter()
    ps = builtin("PS3")
    n_calls = n_paths = 0
    problems = []
    for seed, fractal in ((201, 2.45), (202, 2.6)):
        dem, cloud, missions = prepared(seed, fractal, 10)
        for k in range(50):
            m = missions[k % len(missions)]
            n_calls += 1
            try:
                path, _ = plan(cloud, m, ps, SPEC, 7000 + 100 * seed + k)
            except PcnavError:
                continue
            n_paths += 1
            info = path.info
            xyz = path.xyz
            if math.hypot(*(xyz[0, :2] - m.start)) > SPEC.goal_tolerance or \
                    math.hypot(*(xyz[-1, :2] - m.goal)) > SPEC.goal_tolerance:
                problems.append((seed, k, "endpoint"))
            if not all(assess_waypoint(cloud, w.position[:2], w.heading, SPEC).traversable for w in path.waypoints):
                problems.append((seed, k, "waypoint"))
            if info["rrtstar_length"] > info["birrt_length"] + 1e-9:
                problems.append((seed, k, "rrt* longer"))
            c = info["lto_costs"]
            if any(b > a + 1e-9 for a, b in zip(c, c[1:])):
                problems.append((seed, k, "lto cost"))
    dt = time.perf_counter() - t0
    ok = n_calls == 100 and n_paths > 0 and not problems and dt <= 300
    report(3, "planner validity", ok,
           f"{n_paths}/{n_calls} calls returned paths, {len(problems)} violations {problems[:3]}, {dt:.0f}s")


# 4 ------------------------------------------------------------------------

def test_c04_success_rate_gain():
    t0 = time.perf_counter()
    ps = builtin("PS3")
    n = base = ok = 0
    for seed in (11, 12, 13, 14):
        dem, cloud, missions = prepared(seed)
        for i, m in enumerate(missions):
            n += 1
            base += straight_line_baseline(dem, cloud, m, SPEC).success
            try:
                path, _ = plan(cloud, m, ps, SPEC, 1000 * seed + i)
            except PcnavError:
                continue
            ok += rollout(dem, cloud, path, m, SPEC).success
    dt = time.perf_counter() - t0
    gain = (ok - base) / n
    report(4, "SR gain over straight line", n == 100 and gain >= 0.15 and dt <= 600,
           f"planner SR {ok / n:.2f}, baseline SR {base / n:.2f}, gain {gain:+.2f} (want >= 0.15), {dt:.0f}s")


# 5 ------------------------------------------------------------------------

def test_c05_parameter_set_ordering():
    t0 = time.perf_counter()
    dem, cloud, missions = prepared(301, n_missions=6)
    pt, dx = {}, {}
    for name in ("PS3", "PS13", "PS18"):
        ps = builtin(name)
        pt[name], dx[name] = [], []
        for rep in range(5):
            for m in missions:
                try:
                    path, seconds = plan(cloud, m, ps, SPEC, 50_000 + 100 * rep + int(m.id[1:]))
                except PcnavError:
                    continue
                pt[name].append(seconds)
                out = rollout(dem, cloud, path, m, SPEC, planning_time=seconds)
                if out.success:
                    dx[name].append(out.delta_x)
    med_pt = {k: quantile(v, 0.5) for k, v in pt.items()}
    med_dx = {k: quantile(v, 0.5) for k, v in dx.items()}
    enough = all(len(v) >= 30 for v in pt.values())
    ok = enough and med_pt["PS3"] < med_pt["PS13"] < med_pt["PS18"] and med_dx["PS3"] < med_dx["PS18"]
    dt = time.perf_counter() - t0
    report(5, "parameter-set ordering", ok and dt <= 900,
           "median PT (s) " + ", ".join(f"{k} {v:.3f}" for k, v in med_pt.items())
           + "; median dx (m) " + ", ".join(f"{k} {v:.2f}" for k, v in med_dx.items())
           + f"; n = {[len(v) for v in pt.values()]}, {dt:.0f}s")


# 6 ------------------------------------------------------------------------

def test_c06_correlation_sign(mini_campaign):
    out, recs, _ = mini_campaign
    per_ps = {}
    for r in recs:
        per_ps[r.ps_id] = per_ps.get(r.ps_id, 0) + 1
    rep = correlation_report(recs, builtin_parameter_sets())
    c_pt = rep.coefficient("r_bi_exp", "pt_median")
    c_sr = rep.coefficient("r_bi_exp", "SR")
    ok = len(per_ps) == 20 and min(per_ps.values()) >= 25 and c_pt < -0.3 and c_sr < 0
    report(6, "correlation sign", ok,
           f"r_bi_exp vs PT median {c_pt:+.3f} (want < -0.3), vs SR {c_sr:+.3f} (want < 0), "
           f"{min(per_ps.values())} trials per PS")


# 7 ------------------------------------------------------------------------

def test_c07_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = {}
    # plane fit vs eigen decomposition
    e = 0.0
    for _ in range(50):
        pts = rng.normal(size=(40, 3)) * [2.0, 1.5, 0.1]
        e = max(e, float(np.abs(fit_plane(pts).normal - eigen_normal(pts)).max()))
    worst["plane"] = e
    # roughness vs pairwise separation along the normal
    e = 0.0
    for _ in range(20):
        pts = rng.normal(size=(40, 3)) * [0.1, 0.1, 0.03]
        e = max(e, abs(roughness_score(PointCloud(pts), (0, 0, 0), 10.0) - pairwise_step(pts)))
    worst["roughness"] = e
    # lattice DP vs Dijkstra
    exact = True
    for _ in range(10):
        n, K = 8, 3
        pts = np.zeros((n, K, 3))
        pts[:, :, 0] = np.arange(n)[:, None] + rng.normal(0, 0.1, (n, K))
        pts[:, :, 1:] = rng.normal(0, 0.4, (n, K, 2))
        rough = rng.uniform(0, 0.2, (n, K))
        valid = rng.uniform(size=(n, K)) > 0.25
        valid[:, 0] = True
        E, C = lattice_tables(pts)
        _, cost = lattice_dp_tables(E, C, rough, valid, 1.0, 0.5, 2.0)
        exact &= cost == dijkstra_lattice(E, C, rough, valid, 1.0, 0.5, 2.0)
    # spearman partial vs residual regression
    e = 0.0
    for _ in range(5):
        obs = rng.normal(size=(20, 8))
        obs[:, -1] += obs[:, 0]
        c = spearman_partial(obs)
        e = max(e, max(abs(c[j] - residual_partial(obs, j)) for j in range(7)))
    worst["spearman"] = e
    # quantiles vs full sort
    x = list(rng.exponential(3.0, 1001))
    q_exact = all(quantile(x, q) == sort_quantile(x, q) for q in np.linspace(0, 1, 101))
    dt = time.perf_counter() - t0
    ok = (worst["plane"] <= 1e-6 and worst["roughness"] <= 1e-12 and exact and worst["spearman"] <= 1e-9
          and q_exact and dt <= 60)
    report(7, "oracle equivalence", ok,
           f"plane {worst['plane']:.1e}, roughness {worst['roughness']:.1e}, DP==Dijkstra {exact}, "
           f"spearman {worst['spearman']:.1e}, quantiles exact {q_exact}")


# 8 ------------------------------------------------------------------------

def test_c08_exponential_fit():
    x = np.random.default_rng(88).exponential(5.0, 10_000)
    s1 = fit_exponential(x).scale
    y = np.random.default_rng(89).exponential(1.0, 2_000)
    y *= 8.6 / y.mean()
    s2 = fit_exponential(y).scale
    ok = abs(s1 - 5.0) / 5.0 <= 0.05 and abs(s2 - 8.6) <= 1e-9
    report(8, "exponential fit", ok, f"scale {s1:.3f} for true 5.0; mean-8.6 data -> {s2:.6f}")


# 9 ------------------------------------------------------------------------

def test_c09_determinism(mini_campaign, tmp_path):
    out_a, recs, dt_a = mini_campaign
    t0 = time.perf_counter()
    # second run goes through the command line
    code = dispatch(["campaign", "run", "--out", str(tmp_path)])
    dt_b = time.perf_counter() - t0
    same = code == 0 and (out_a / "records.csv").read_bytes() == (tmp_path / "records.csv").read_bytes()
    ok = same and len(recs) == 1500 and dt_a + dt_b <= 1200
    report(9, "determinism", ok,
           f"{len(recs)} records, sha256 {file_sha256(out_a / 'records.csv')[:12]} vs "
           f"{file_sha256(tmp_path / 'records.csv')[:12]}, {dt_a + dt_b:.0f}s for both runs")


# 10 -----------------------------------------------------------------------

def test_c10_unit_checks():
    r = near_radius(0.1, 35.0)
    dem, cloud, missions = prepared(401, n_missions=1)
    ps = builtin("PS1")
    rng = np.random.default_rng(10)
    p1 = birrt_plan(cloud, missions[0], ps, SPEC, rng)
    p2 = rrtstar_refine(cloud, p1, missions[0], ps, SPEC, rng)
    trace = p2.info["rrtstar_trace"]
    navg, exact = 0.0, True
    for n_i, logged in trace:
        navg = ps.alpha * n_i + (1 - ps.alpha) * navg
        exact &= logged == navg
    stop_ok = trace[-1][1] > ps.n_avg_max or p2.info["rrtstar_capped"]
    ok = abs(r - 3.5) <= 1e-12 and exact and stop_ok
    report(10, "unit checks", ok, f"r_near(0.1, 35) = {r!r}; moving average over {len(trace)} steps "
                                  f"{'matches' if exact else 'differs from'} recomputation")
