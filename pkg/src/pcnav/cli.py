"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PcnavError

log = logging.getLogger("pcnav")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- manifests -------------------------------------------------------------

def _sha(path) -> str:
    from .campaign import file_sha256
    return file_sha256(path)


def write_manifest(out: Path, command: str, args, inputs=(), outputs=(), started=None, extra=None,
                   name="manifest.json"):
    """Write a manifest next to the outputs (atomically, via rename)."""
    from .campaign import write_json_atomic
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func",) and not callable(v)}
    m = {
        "tool": "pcnav",
        "version": __version__,
        "command": command,
        "config": echo,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha(p) for p in inputs},
        "outputs": {Path(p).name: _sha(p) for p in outputs},
        "started": started,
        "ended": time.time(),
    }
    if extra:
        m.update(extra)
    write_json_atomic(m, out / name)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _xy(text: str):
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y but got {text!r}") from None
    return x, y


def _section(args, name) -> dict:
    """Key/values from ``[name]`` of the ``--config`` file (empty without one)."""
    if not getattr(args, "config", None):
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(args.config):
        raise UsageError(f"cannot read config file {args.config}")
    return dict(cp[name]) if cp.has_section(name) else {}


def _spec(args):
    from .assessment import robot_profile
    return robot_profile(getattr(args, "profile", "sim"))


def _load_cloud(path):
    from .geometry import read_xyz
    return read_xyz(path)


def _parameter_set(text: str):
    from .params import ParameterSet, builtin
    p = Path(text)
    if p.exists():
        data = json.loads(p.read_text())
        if isinstance(data, list):
            if len(data) != 1:
                raise UsageError(f"{text} holds {len(data)} parameter sets; pass a file with exactly one")
            data = data[0]
        return ParameterSet.from_dict(data)
    return builtin(text)


# --- terrain / mission / ps ------------------------------------------------

def cmd_terrain_generate(args):
    from .geometry import dem_to_pointcloud, write_dem_ascii, write_xyz
    from .terrain import TerrainConfig, categorize_roughness, dem_hash, generate_dem
    started = time.time()
    from .campaign import _TERRAIN_KEYS
    cfg_kw = {}
    for k, v in _section(args, "terrain").items():
        if k not in _TERRAIN_KEYS:
            raise UsageError(f"[terrain] {k}: unknown terrain key")
        cfg_kw[k] = _TERRAIN_KEYS[k](v)
    for key in ("fractal_coeff", "amplitude", "cell_size", "n_octaves"):
        if getattr(args, key) is not None:
            cfg_kw[key] = getattr(args, key)
    if args.extent:
        cfg_kw["extent"] = tuple(args.extent)
    cfg_kw["seed"] = args.seed if args.seed is not None else int(cfg_kw.get("seed", 0))
    cfg = TerrainConfig(**cfg_kw)
    out = _out_dir(args)
    dem = generate_dem(cfg)
    outputs = [out / "dem.asc", out / "categories.csv"]
    write_dem_ascii(dem, outputs[0])
    grid = categorize_roughness(dem)
    np.savetxt(outputs[1], grid.categories[::-1], fmt="%d", delimiter=",")
    if args.cloud_spacing > 0:
        outputs.append(out / "cloud.xyz")
        write_xyz(dem_to_pointcloud(dem, args.cloud_spacing), outputs[-1])
    write_manifest(out, "terrain generate", args, outputs=outputs, started=started,
                   extra={"terrain": cfg.to_dict(), "dem_hash": dem_hash(dem), "categories": grid.counts()})
    print(json.dumps({"dem": str(outputs[0]), "dem_hash": dem_hash(dem), **grid.counts()}))


def cmd_mission_sample(args):
    from .geometry import read_dem_ascii
    from .terrain import categorize_roughness, sample_mission
    started = time.time()
    dem = read_dem_ascii(args.dem)
    grid = categorize_roughness(dem, args.t_low, args.t_high)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    missions = [sample_mission(dem, grid, args.euclid, rng, mission_id=f"M{i + 1}").to_dict()
                for i in range(args.count)]
    text = json.dumps(missions, indent=2)
    if args.out:
        out = _out_dir(args)
        (out / "missions.json").write_text(text + "\n")
        write_manifest(out, "mission sample", args, inputs=[args.dem], outputs=[out / "missions.json"],
                       started=started)
    print(text)


def cmd_ps_list(args):
    from .params import FIELD_NAMES, builtin_parameter_sets
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("name",) + FIELD_NAMES)
    for ps in builtin_parameter_sets():
        w.writerow((ps.name,) + tuple(f"{v:g}" for v in ps.values()))


def cmd_ps_sample(args):
    from .params import sample_parameter_set
    started = time.time()
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    sets = [sample_parameter_set(rng, name=f"S{i + 1}").to_dict() for i in range(args.count)]
    text = json.dumps(sets, indent=2)
    if args.out:
        out = _out_dir(args)
        (out / "parameter_sets.json").write_text(text + "\n")
        write_manifest(out, "ps sample", args, outputs=[out / "parameter_sets.json"], started=started)
    print(text)


# --- assess / plan / simulate ----------------------------------------------

def cmd_assess(args):
    from .assessment import assess_waypoint
    cloud = _load_cloud(args.cloud)
    v = assess_waypoint(cloud, args.xy, args.heading, _spec(args))
    res = {"traversable": v.traversable, "reason": v.reason.value if v.reason else None}
    if v.pose is not None:
        res.update(position=[float(c) for c in v.pose.position], roll=v.pose.roll, pitch=v.pose.pitch,
                   roughness=v.pose.roughness, normal=[float(c) for c in v.pose.normal])
    print(json.dumps(res))


def cmd_plan(args):
    from .planner import PlannerLimits, plan, write_path_csv
    from .terrain import Mission
    started = time.time()
    cloud = _load_cloud(args.cloud)
    ps = _parameter_set(args.ps)
    mission = Mission.between("cli", args.start, args.goal)
    limits = PlannerLimits(args.birrt_iters, args.rrtstar_iters, args.lto_iters)
    path, pt = plan(cloud, mission, ps, _spec(args), args.seed if args.seed is not None else 0, limits)
    info = path.info
    summary = {
        "length": path.length,
        "n_waypoints": len(path),
        "planning_time_ms": 1e3 * pt,
        "phase_ms": info["phase_ms"],
        "iterations": {"birrt": info["birrt_iters"], "rrtstar": info["rrtstar_iters"], "lto": info["lto_iters"]},
        "assessments": info["assessments"],
        "rrtstar_capped": info["rrtstar_capped"],
        "parameter_set": ps.to_dict(),
    }
    if args.out:
        out = _out_dir(args)
        write_path_csv(path, out / "path.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        write_manifest(out, "plan", args, inputs=[args.cloud], outputs=[out / "path.csv", out / "summary.json"],
                       started=started)
    else:
        write_path_csv(path, "/dev/stdout")
    print(json.dumps(summary), file=sys.stderr if not args.out else sys.stdout)


def cmd_simulate(args):
    from .geometry import read_dem_ascii
    from .planner import read_path_csv
    from .rollout import rollout, trace_rows
    from .terrain import Mission
    started = time.time()
    dem = read_dem_ascii(args.dem)
    cloud = _load_cloud(args.cloud) if args.cloud else None
    arr = read_path_csv(args.path)
    start = args.start or tuple(arr[0, :2])
    goal = args.goal or tuple(arr[-1, :2])
    mission = Mission.between("cli", start, goal)
    out = rollout(dem, cloud, arr[:, :2], mission, _spec(args), args.dt, args.max_time,
                  record_trace=bool(args.trace))
    outputs = []
    if args.trace:
        rows = trace_rows(out.trace)
        with open(args.trace, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        outputs.append(Path(args.trace))
    text = json.dumps(out.to_dict())
    if args.out:
        d = _out_dir(args)
        (d / "outcome.json").write_text(text + "\n", encoding="utf-8")
        inputs = [args.dem, args.path] + ([args.cloud] if args.cloud else [])
        write_manifest(d, "simulate", args, inputs=inputs, outputs=[d / "outcome.json"] + outputs,
                       started=started)
    print(text)


# --- campaign --------------------------------------------------------------

def cmd_campaign_run(args):
    from .campaign import bundled_config_text, load_config, run_campaign
    cfg_arg = args.config or "paper-mini"
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.workers:
        overrides["workers"] = args.workers
    if cfg_arg in ("paper-mini", "paper_mini"):
        cfg = load_config(text=bundled_config_text("paper_mini"), **overrides)
    else:
        cfg = load_config(cfg_arg, **overrides)
    out = Path(args.out or cfg.out)

    def progress(k, n, rec):
        if k % 50 == 0 or k == n:
            log.info("%d/%d trials", k, n)

    records = run_campaign(cfg, out, progress=progress)
    print(json.dumps({"records": len(records), "out": str(out)}))


# --- analyze ---------------------------------------------------------------

def _records(args):
    from .analytics import PopulationFilter
    from .campaign import load_campaign
    records, missions, sets = load_campaign(args.records)
    return PopulationFilter.parse(args.filter).apply(records), missions, sets


def _write_rows(rows, out, args=None):
    """CSV to ``out`` (plus ``<stem>.manifest.json`` beside it) or to stdout."""
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    finally:
        if out:
            fh.close()
    if out and args is not None:
        rec = Path(args.records)
        inputs = [rec / "records.csv" if rec.is_dir() else rec]
        write_manifest(Path(out).parent, f"analyze {args.action}", args, inputs=inputs, outputs=[out],
                       started=None, name=f"{Path(out).stem}.manifest.json")


def _analysis_out(args, name):
    if not args.out:
        return None
    p = Path(args.out)
    if p.suffix.lower() == ".csv":
        p.parent.mkdir(parents=True, exist_ok=True)
        return p
    p.mkdir(parents=True, exist_ok=True)
    return p / name


def cmd_analyze_stats(args):
    from .analytics import population_stats
    recs, _, _ = _records(args)
    st = population_stats(recs, integer_pt=args.integer_pt)
    rows = [("metric", "n", "mean", "median", "iqr", "min", "max")]
    for name, s in (("delta_x_m", st.delta_x), ("tpl_m", st.tpl), ("planning_time_s", st.planning_time)):
        rows.append((name, s.n, s.mean, s.median, s.iqr, s.min, s.max))
    rows += [("n", st.n), ("successes", st.successes), ("SR", st.sr), ("FR", st.fr)]
    _write_rows(rows, _analysis_out(args, "stats.csv"), args)


def cmd_analyze_rank(args):
    from .analytics import population_stats, rank_population
    recs, missions, _ = _records(args)
    euclid = {(tid, m.id): m.euclid for tid, ms in missions.items() for m in ms}
    key = {"ps": lambda r: r.ps_id, "mission": lambda r: f"{r.terrain_id}:{r.mission_id}"}[args.by]
    groups = {}
    for r in recs:
        groups.setdefault(key(r), []).append(r)
    rows = [(args.by, "n", "FR", "dx_median", "dx_iqr", "euclid", "rank")]
    for k in sorted(groups, key=lambda s: (len(s), s)):
        rs = groups[k]
        e = float(np.mean([euclid[(r.terrain_id, r.mission_id)] for r in rs]))
        st = population_stats(rs)
        rows.append((k, st.n, st.fr, st.delta_x.median, st.delta_x.iqr, e, rank_population(st, e)))
    _write_rows(rows, _analysis_out(args, f"rank_by_{args.by}.csv"), args)


def cmd_analyze_hist(args):
    from .analytics import fit_exponential, histogram_normalized
    recs, _, _ = _records(args)
    if args.metric == "pt":
        vals = [r.pt_ms / 1000.0 for r in recs if r.planned]
    else:
        vals = [getattr(r, {"dx": "dx_m", "tpl": "tpl_m"}[args.metric]) for r in recs if r.success]
    edges, dens = histogram_normalized(vals, args.bin_width)
    rows = [("left", "right", "density")] + [(edges[i], edges[i + 1], dens[i]) for i in range(len(dens))]
    _write_rows(rows, _analysis_out(args, f"hist_{args.metric}.csv"), args)
    if args.fit_exp:
        fit = fit_exponential(np.clip(vals, 0.0, None))
        print(json.dumps({"rate": fit.rate, "scale": fit.scale, "ks": fit.ks, "n": fit.n}), file=sys.stderr)


def cmd_analyze_heatmap(args):
    from .analytics import path_heatmap
    from .campaign import path_file
    from .planner import read_path_csv
    recs, missions, _ = _records(args)
    tid, mid = args.mission.split(":", 1)
    mission = next((m for m in missions.get(tid, []) if m.id == mid), None)
    if mission is None:
        raise UsageError(f"unknown mission {args.mission}")
    files = [path_file(args.records, *r.key) for r in recs
             if r.terrain_id == tid and r.mission_id == mid and r.planned]
    files = [f for f in files if f.exists()]
    if not files:
        raise PcnavError("no saved paths for this mission; run the campaign with save_paths = true")
    hm = path_heatmap([read_path_csv(f)[:, :2] for f in files], mission, args.res)
    ys = (np.arange(hm.counts.shape[0]) - hm.half) * hm.res
    rows = [("y\\x",) + tuple(f"{x:g}" for x in hm.x_edges[:-1])]
    rows += [(f"{y:g}",) + tuple(int(c) for c in row) for y, row in zip(ys, hm.counts)]
    _write_rows(rows, _analysis_out(args, f"heatmap_{tid}_{mid}.csv"), args)


def cmd_analyze_corr(args):
    from .analytics import correlation_report
    recs, _, sets = _records(args)
    rep = correlation_report(recs, sets, aggregation=args.aggregation)
    _write_rows(list(rep.rows()), _analysis_out(args, "correlation.csv"), args)


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (master seed for campaigns)")
    common.add_argument("--out", default=None, help="output directory (or .csv file for analyze)")
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--profile", default="sim", help="robot profile: sim or field")

    ap = _Parser(prog="pcnav", description="Terrain-aware path planning on point clouds.")
    ap.add_argument("--version", action="version", version=f"pcnav {__version__}")
    ap.add_argument("--log-level", default=os.environ.get("PCNAV_LOG_LEVEL", "WARNING"))
    sub = ap.add_subparsers(dest="command", metavar="{terrain,mission,ps,assess,plan,simulate,campaign,analyze}",
                            parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("terrain", help="terrain generation").add_subparsers(dest="action", parser_class=_Parser)
    t.required = True
    g = t.add_parser("generate", parents=[common], help="write a fractal DEM (and optional point cloud)")
    g.add_argument("--fractal-coeff", dest="fractal_coeff", type=float)
    g.add_argument("--amplitude", type=float)
    g.add_argument("--cell-size", dest="cell_size", type=float)
    g.add_argument("--n-octaves", dest="n_octaves", type=int)
    g.add_argument("--extent", type=float, nargs=2)
    g.add_argument("--cloud-spacing", type=float, default=0.125, help="0 to skip the point cloud")
    g.set_defaults(func=cmd_terrain_generate)

    m = sub.add_parser("mission", help="mission sampling").add_subparsers(dest="action", parser_class=_Parser)
    m.required = True
    s = m.add_parser("sample", parents=[common], help="sample start/goal pairs on a DEM")
    s.add_argument("--dem", required=True)
    s.add_argument("--euclid", type=float, default=35.0)
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--t-low", type=float, default=0.15)
    s.add_argument("--t-high", type=float, default=0.35)
    s.set_defaults(func=cmd_mission_sample)

    p = sub.add_parser("ps", help="planner parameter sets").add_subparsers(dest="action", parser_class=_Parser)
    p.required = True
    p.add_parser("list", parents=[common], help="print the 20 built-in sets").set_defaults(func=cmd_ps_list)
    s = p.add_parser("sample", parents=[common], help="draw random parameter sets")
    s.add_argument("--count", type=int, default=20)
    s.set_defaults(func=cmd_ps_sample)

    a = sub.add_parser("assess", parents=[common], help="assess one waypoint")
    a.add_argument("--cloud", required=True)
    a.add_argument("--xy", type=_xy, required=True)
    a.add_argument("--heading", type=float, default=0.0)
    a.set_defaults(func=cmd_assess)

    p = sub.add_parser("plan", parents=[common], help="plan a path between two points")
    p.add_argument("--cloud", required=True)
    p.add_argument("--start", type=_xy, required=True)
    p.add_argument("--goal", type=_xy, required=True)
    p.add_argument("--ps", default="PS3", help="built-in id (PS3) or JSON file")
    p.add_argument("--birrt-iters", type=int, default=50_000)
    p.add_argument("--rrtstar-iters", type=int, default=20_000)
    p.add_argument("--lto-iters", type=int, default=1_000)
    p.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", parents=[common], help="drive a planned path on a DEM")
    s.add_argument("--dem", required=True)
    s.add_argument("--cloud", default=None)
    s.add_argument("--path", required=True)
    s.add_argument("--start", type=_xy)
    s.add_argument("--goal", type=_xy)
    s.add_argument("--dt", type=float, default=0.05)
    s.add_argument("--max-time", type=float, default=300.0)
    s.add_argument("--trace", default=None, help="write the state log to this CSV")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("campaign", help="Monte-Carlo campaigns").add_subparsers(dest="action", parser_class=_Parser)
    c.required = True
    r = c.add_parser("run", parents=[common], help="run (or resume) a campaign")
    r.add_argument("--workers", type=int, default=None)
    r.set_defaults(func=cmd_campaign_run)

    an = sub.add_parser("analyze", help="statistics over campaign records").add_subparsers(
        dest="action", parser_class=_Parser)
    an.required = True
    base = _Parser(add_help=False)
    base.add_argument("--records", required=True, help="campaign output directory")
    base.add_argument("--filter", default="", help="e.g. 'terrain_id=T1|T2,mission_id!=T1:M2'")
    x = an.add_parser("stats", parents=[common, base], help="population statistics")
    x.add_argument("--integer-pt", action="store_true", help="use whole-second planning times")
    x.set_defaults(func=cmd_analyze_stats)
    x = an.add_parser("rank", parents=[common, base], help="rank per PS or per mission")
    x.add_argument("--by", choices=("ps", "mission"), default="ps")
    x.set_defaults(func=cmd_analyze_rank)
    x = an.add_parser("hist", parents=[common, base], help="normalised histogram")
    x.add_argument("--metric", choices=("dx", "tpl", "pt"), default="dx")
    x.add_argument("--bin-width", type=float, default=1.0)
    x.add_argument("--fit-exp", action="store_true", help="also fit an exponential (printed to stderr)")
    x.set_defaults(func=cmd_analyze_hist)
    x = an.add_parser("heatmap", parents=[common, base], help="waypoint heatmap in the mission frame")
    x.add_argument("--mission", required=True, help="terrain:mission, e.g. T1:M2")
    x.add_argument("--res", type=float, default=0.5)
    x.set_defaults(func=cmd_analyze_heatmap)
    x = an.add_parser("corr", parents=[common, base], help="Spearman partial correlations")
    x.add_argument("--aggregation", choices=("per_ps", "per_trial"), default="per_ps")
    x.set_defaults(func=cmd_analyze_corr)
    return ap


def _leaf(parser, args):
    """The subparser that handled ``args`` (command, then action when there is one)."""
    p = parser
    for dest in ("command", "action"):
        name = getattr(args, dest, None)
        subs = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
        if name is None or not subs:
            break
        p = subs[0].choices[name]
    return p


def _config_section_name(args) -> str:
    action = getattr(args, "action", None)
    return f"{args.command}.{action}" if action else args.command


def _parse(parser, argv):
    """Parse twice when ``--config`` names a file: its ``[command.action]`` section supplies defaults.

    Values given on the command line always win.  ``campaign run`` and
    ``terrain generate`` read their own sections instead.
    """
    args = parser.parse_args(argv)
    if not getattr(args, "config", None) or args.command in ("campaign", "terrain"):
        return args
    cp = configparser.ConfigParser()
    if not cp.read(args.config):
        raise UsageError(f"cannot read config file {args.config}")
    name = _config_section_name(args)
    if not cp.has_section(name):
        return args
    leaf = _leaf(parser, args)
    by_dest = {a.dest: a for a in leaf._actions}
    preset = {}
    for key, raw in cp[name].items():
        dest = key.replace("-", "_")
        act = by_dest.get(dest)
        if act is None or dest in ("config", "help"):
            raise UsageError(f"[{name}] {key}: not an option of this command")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            val = cp[name].getboolean(key)
        elif act.nargs not in (None, "?"):
            val = [act.type(v) if act.type else v for v in raw.split()]
        else:
            try:
                val = act.type(raw) if act.type else raw
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"[{name}] {key}: {exc}") from None
        preset[dest] = val
    # subparsers overwrite a pre-filled namespace with their own defaults, so change those instead
    leaf.set_defaults(**preset)
    return parser.parse_args(argv)


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"pcnav: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PcnavError, ValueError, OSError, KeyError) as exc:
        print(f"pcnav: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
