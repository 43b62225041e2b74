"""Monte-Carlo campaigns: terrain x mission x parameter set x repetition grids.

Every trial gets a seed derived from its labels alone, so the record file
does not depend on execution order.  Records are appended to a log as they
complete and rewritten in canonical order at the end.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .assessment import RobotSpec, point_roughness, robot_profile
from .errors import PcnavError, RejectedInput
from .geometry import PointCloud, dem_to_pointcloud
from .params import ParameterSet, builtin_parameter_sets, sample_parameter_set
from .planner import PlannerLimits, plan, write_path_csv
from .rollout import DEFAULT_DT, DEFAULT_MAX_TIME, Status, failed_plan, rollout
from .terrain import Mission, TerrainConfig, categorize_roughness, dem_hash, generate_dem, sample_mission

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("terrain_id", "mission_id", "ps_id", "rep", "seed", "status",
                  "pt_ms", "pt_s", "tpl_m", "dx_m")
ENV_PREFIX = "PCNAV_"
CLOUD_SPACING = 0.125

# Nominal cost of one terrain assessment on the work clock.  Planning time on
# this clock is a deterministic function of the work done, which keeps
# record files byte-identical across runs and machines.
WORK_MS_PER_ASSESSMENT = 0.08


def derive_seed(master_seed, *labels) -> int:
    """Stable 63-bit seed from the master seed and a tuple of labels."""
    text = "\x1f".join(str(v) for v in (master_seed, *labels))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class TerrainEntry:
    id: str
    config: TerrainConfig


@dataclass
class CampaignConfig:
    master_seed: int = 0
    terrains: list = field(default_factory=list)
    missions_per_terrain: int = 5
    euclid: float = 35.0
    parameter_sets: list = field(default_factory=builtin_parameter_sets)
    reps: int = 5
    spec_profile: str = "sim"
    out: str = "campaign_out"
    clock: str = "work"     # "work" or "wall"
    dt: float = DEFAULT_DT
    max_time: float = DEFAULT_MAX_TIME
    workers: int = 1
    limits: PlannerLimits = PlannerLimits()
    ps_source: str = "builtin"
    save_paths: bool = False

    def __post_init__(self):
        for name in ("missions_per_terrain", "reps", "workers"):
            if int(getattr(self, name)) < 1:
                raise RejectedInput(f"{name} must be >= 1")
        if not self.terrains:
            raise RejectedInput("at least one terrain is required")
        if not self.parameter_sets:
            raise RejectedInput("at least one parameter set is required")
        ids = [t.id for t in self.terrains]
        if len(set(ids)) != len(ids):
            raise RejectedInput("terrain ids must be unique")
        names = [p.name for p in self.parameter_sets]
        if len(set(names)) != len(names) or "" in names:
            raise RejectedInput("parameter sets need unique, non-empty names")
        if self.clock not in ("work", "wall"):
            raise RejectedInput("clock must be 'work' or 'wall'")
        robot_profile(self.spec_profile)

    @property
    def spec(self) -> RobotSpec:
        return robot_profile(self.spec_profile)

    @property
    def n_trials(self) -> int:
        return len(self.terrains) * self.missions_per_terrain * len(self.parameter_sets) * self.reps

    def echo(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "terrains": [{"id": t.id, **t.config.to_dict()} for t in self.terrains],
            "missions_per_terrain": self.missions_per_terrain,
            "euclid": self.euclid,
            "ps_source": self.ps_source,
            "parameter_sets": [p.to_dict() for p in self.parameter_sets],
            "reps": self.reps,
            "spec_profile": self.spec_profile,
            "clock": self.clock,
            "dt": self.dt,
            "max_time": self.max_time,
            "limits": asdict(self.limits),
            "save_paths": self.save_paths,
        }


def _extent(text):
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if len(vals) != 2:
        raise RejectedInput(f"extent needs two numbers, got {text!r}")
    return vals


_TERRAIN_KEYS = {"seed": int, "fractal_coeff": float, "amplitude": float, "cell_size": float,
                 "n_octaves": int, "lacunarity": float, "base_wavelength": float, "n_ridges": int,
                 "extent": _extent}


def _parameter_sets_from(source: str, master_seed, base_dir: Path):
    if source == "builtin":
        return builtin_parameter_sets()
    if source.startswith("sample:"):
        n = int(source.split(":", 1)[1])
        rng = np.random.default_rng(derive_seed(master_seed, "parameter_sets"))
        return [sample_parameter_set(rng, name=f"S{i + 1}") for i in range(n)]
    if source.startswith("file:"):
        path = Path(source.split(":", 1)[1])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise RejectedInput(f"parameter-set file {path} does not exist")
        rows = json.loads(path.read_text())
        return [ParameterSet.from_dict(r) for r in rows]
    raise RejectedInput(f"unknown ps.source {source!r}")


def _apply_env(cp: configparser.ConfigParser, environ):
    """``PCNAV_<SECTION>__<KEY>=value`` overrides ``[section] key``.

    Section names match case-insensitively with ``.`` written as ``_``, so
    ``PCNAV_TERRAIN_T3__AMPLITUDE`` targets ``[terrain.T3]``.
    """
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        env_sec, key = name[len(ENV_PREFIX):].split("__", 1)
        match = [s for s in cp.sections() if s.replace(".", "_").lower() == env_sec.lower()]
        if match:
            section = match[0]
        elif env_sec.lower().startswith("terrain_"):
            section = "terrain." + env_sec[len("terrain_"):]
        else:
            section = env_sec.lower()
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key.lower(), value)


def load_config(path=None, text=None, environ=None, **overrides) -> CampaignConfig:
    """Read an INI-style campaign file.

    ``[campaign]`` holds master_seed, missions_per_terrain, euclid, reps,
    spec_profile, ps.source, clock, dt, max_time, workers, out.  Each
    ``[terrain.<id>]`` section holds TerrainConfig fields.
    """
    cp = configparser.ConfigParser()
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise RejectedInput(f"config file {path} does not exist")
        cp.read(path)
        base_dir = path.parent
    if text is not None:
        cp.read_string(text)
    _apply_env(cp, os.environ if environ is None else environ)
    if not cp.has_section("campaign"):
        raise RejectedInput("config needs a [campaign] section")
    c = cp["campaign"]
    master_seed = c.getint("master_seed", 0)
    terrains = []
    for sec in cp.sections():
        if not sec.startswith("terrain."):
            continue
        kw = {}
        for k, v in cp[sec].items():
            if k not in _TERRAIN_KEYS:
                raise RejectedInput(f"unknown terrain key {k!r} in [{sec}]")
            kw[k] = _TERRAIN_KEYS[k](v)
        tid = sec.split(".", 1)[1]
        kw.setdefault("seed", derive_seed(master_seed, "terrain", tid) % (2 ** 32))
        terrains.append(TerrainEntry(tid, TerrainConfig(**kw)))
    source = c.get("ps.source", "builtin")
    limits = PlannerLimits(c.getint("birrt_iters", 50_000), c.getint("rrtstar_iters", 20_000),
                           c.getint("lto_iters", 1_000))
    kw = dict(
        master_seed=master_seed,
        terrains=terrains,
        missions_per_terrain=c.getint("missions_per_terrain", 5),
        euclid=c.getfloat("euclid", 35.0),
        parameter_sets=_parameter_sets_from(source, master_seed, base_dir),
        reps=c.getint("reps", 5),
        spec_profile=c.get("spec_profile", "sim"),
        out=c.get("out", "campaign_out"),
        clock=c.get("clock", "work"),
        dt=c.getfloat("dt", DEFAULT_DT),
        max_time=c.getfloat("max_time", DEFAULT_MAX_TIME),
        workers=c.getint("workers", 1),
        limits=limits,
        ps_source=source,
        save_paths=c.getboolean("save_paths", False),
    )
    kw.update(overrides)
    return CampaignConfig(**kw)


def bundled_config_text(name: str = "paper_mini") -> str:
    return resources.files("pcnav").joinpath("configs", f"{name}.ini").read_text()


def paper_mini(**overrides) -> CampaignConfig:
    """The bundled desk-scale campaign: 3 terrains x 5 missions x 20 PS x 5 reps."""
    return load_config(text=bundled_config_text("paper_mini"), environ={}, **overrides)


@dataclass(frozen=True)
class TrialRecord:
    terrain_id: str
    mission_id: str
    ps_id: str
    rep: int
    seed: int
    status: str
    pt_ms: float
    pt_s: int
    tpl_m: float
    dx_m: float

    @property
    def key(self):
        return (self.terrain_id, self.mission_id, self.ps_id, self.rep)

    @property
    def success(self) -> bool:
        return self.status == Status.SUCCESS.value

    @property
    def planned(self) -> bool:
        return self.status != Status.PLAN_FAILED.value

    def row(self):
        return [self.terrain_id, self.mission_id, self.ps_id, str(self.rep), str(self.seed), self.status,
                f"{self.pt_ms:.3f}", str(self.pt_s), f"{self.tpl_m:.6f}", f"{self.dx_m:.6f}"]

    @classmethod
    def from_row(cls, row: dict):
        return cls(row["terrain_id"], row["mission_id"], row["ps_id"], int(row["rep"]), int(row["seed"]),
                   row["status"], float(row["pt_ms"]), int(row["pt_s"]), float(row["tpl_m"]), float(row["dx_m"]))


def pt_seconds(pt_ms: float) -> int:
    """Planning time reported in whole seconds, rounded up."""
    return int(math.ceil(round(pt_ms, 3) / 1000.0))


@dataclass
class TerrainBundle:
    id: str
    dem: object
    cloud: PointCloud
    missions: list


def prepare_terrain(entry: TerrainEntry, cfg: CampaignConfig) -> TerrainBundle:
    dem = generate_dem(entry.config)
    cloud = dem_to_pointcloud(dem, CLOUD_SPACING)
    point_roughness(cloud, cfg.spec.normal_radius)
    grid = categorize_roughness(dem)
    rng = np.random.default_rng(derive_seed(cfg.master_seed, entry.id, "missions"))
    missions = [sample_mission(dem, grid, cfg.euclid, rng, mission_id=f"M{i + 1}")
                for i in range(cfg.missions_per_terrain)]
    return TerrainBundle(entry.id, dem, cloud, missions)


def run_trial(bundle: TerrainBundle, mission: Mission, ps: ParameterSet, rep: int, cfg: CampaignConfig):
    """Plan and drive one trial; planner errors become a PlanFailed record."""
    seed = derive_seed(cfg.master_seed, bundle.id, mission.id, ps.name, rep)
    spec = cfg.spec
    t0 = time.perf_counter()
    try:
        path, wall = plan(bundle.cloud, mission, ps, spec, seed, cfg.limits)
        work_ms = path.info["assessments"] * WORK_MS_PER_ASSESSMENT
        wall_ms = 1e3 * wall
        pt_ms = work_ms if cfg.clock == "work" else wall_ms
        out = rollout(bundle.dem, bundle.cloud, path, mission, spec, cfg.dt, cfg.max_time, pt_ms / 1e3)
    except PcnavError as exc:
        wall_ms = 1e3 * (time.perf_counter() - t0)
        pt_ms = 0.0 if cfg.clock == "work" else wall_ms
        out = failed_plan(mission, pt_ms / 1e3, f"{type(exc).__name__}: {exc}")
        path = None
    rec = TrialRecord(bundle.id, mission.id, ps.name, rep, seed, out.status.value,
                      pt_ms, pt_seconds(pt_ms), out.tpl, out.tpl - mission.euclid)
    return rec, wall_ms, path


def _canonical_order(cfg: CampaignConfig, bundles):
    order = {}
    for ti, b in enumerate(bundles):
        for mi, m in enumerate(b.missions):
            for pi, ps in enumerate(cfg.parameter_sets):
                for rep in range(cfg.reps):
                    order[(b.id, m.id, ps.name, rep)] = len(order)
    return order


def read_records(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / "records.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise RejectedInput(f"{path} does not have the record columns {RECORD_COLUMNS}")
        return [TrialRecord.from_row(r) for r in reader]


def write_records(records, path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.row())
    os.replace(tmp, path)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(obj, path) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


_WORKER = {}


def _worker_init(cfg, bundles, out):
    _WORKER["cfg"] = cfg
    _WORKER["bundles"] = {b.id: b for b in bundles}
    _WORKER["out"] = out


def path_file(out, terrain_id, mission_id, ps_id, rep) -> Path:
    return Path(out) / "paths" / f"{terrain_id}_{mission_id}_{ps_id}_{rep}.csv"


def _worker_run(task):
    tid, mi, pi, rep = task
    cfg = _WORKER["cfg"]
    b = _WORKER["bundles"][tid]
    rec, wall_ms, path = run_trial(b, b.missions[mi], cfg.parameter_sets[pi], rep, cfg)
    if cfg.save_paths and path is not None:
        write_path_csv(path, path_file(_WORKER["out"], *rec.key))
    return rec, wall_ms


def run_campaign(cfg: CampaignConfig, out=None, progress=None) -> list:
    """Run every trial of ``cfg`` not already logged under ``out``; return the canonical records.

    Writes ``records.csv`` (canonical order), ``records.log.csv`` (append
    order, used for resuming), ``wall_times.csv``, ``missions.json``,
    ``parameter_sets.json`` and ``manifest.json``.
    """
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    manifest = {"tool": "pcnav", "version": __version__, "config": cfg.echo(),
                "started": started, "status": "running"}
    bundles = [prepare_terrain(t, cfg) for t in cfg.terrains]
    write_json_atomic({b.id: [m.to_dict() for m in b.missions] for b in bundles}, out / "missions.json")
    write_json_atomic([p.to_dict() for p in cfg.parameter_sets], out / "parameter_sets.json")
    manifest["terrain_hashes"] = {b.id: dem_hash(b.dem) for b in bundles}
    order = _canonical_order(cfg, bundles)
    if cfg.save_paths:
        (out / "paths").mkdir(exist_ok=True)

    log_path = out / "records.log.csv"
    done = {}
    if log_path.exists():
        for r in read_records(log_path):
            if r.key in order:
                done[r.key] = r
    log.info("campaign: %d trials, %d already logged", len(order), len(done))

    tasks = []
    for b in bundles:
        for mi, m in enumerate(b.missions):
            for pi, ps in enumerate(cfg.parameter_sets):
                for rep in range(cfg.reps):
                    if (b.id, m.id, ps.name, rep) not in done:
                        tasks.append((b.id, mi, pi, rep))

    fresh = not log_path.exists()
    try:
        with open(log_path, "a", newline="", encoding="utf-8") as fh, \
                open(out / "wall_times.csv", "a", newline="", encoding="utf-8") as wfh:
            w = csv.writer(fh, lineterminator="\n")
            ww = csv.writer(wfh, lineterminator="\n")
            if fresh:
                w.writerow(RECORD_COLUMNS)
                ww.writerow(["terrain_id", "mission_id", "ps_id", "rep", "wall_ms"])
            if cfg.workers > 1:
                pool = ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(cfg, bundles, out))
                results = pool.map(_worker_run, tasks, chunksize=4)
            else:
                _worker_init(cfg, bundles, out)
                pool = None
                results = map(_worker_run, tasks)
            try:
                for k, (rec, wall_ms) in enumerate(results, 1):
                    w.writerow(rec.row())
                    ww.writerow([rec.terrain_id, rec.mission_id, rec.ps_id, rec.rep, f"{wall_ms:.3f}"])
                    fh.flush()
                    wfh.flush()
                    done[rec.key] = rec
                    if progress:
                        progress(k, len(tasks), rec)
            finally:
                if pool is not None:
                    pool.shutdown()
    except OSError as exc:
        manifest.update(status="aborted", error=str(exc), n_records=len(done), ended=time.time())
        try:
            write_json_atomic(manifest, out / "manifest.json")
        finally:
            raise

    records = sorted(done.values(), key=lambda r: order[r.key])
    write_records(records, out / "records.csv")
    manifest.update(status="complete", n_records=len(records), ended=time.time(),
                    hashes={name: file_sha256(out / name)
                            for name in ("records.csv", "missions.json", "parameter_sets.json")})
    write_json_atomic(manifest, out / "manifest.json")
    # hand back what was persisted, so fresh and resumed runs look the same to callers
    return read_records(out / "records.csv")


def load_campaign(out):
    """``(records, missions_by_terrain, parameter_sets)`` from a campaign directory."""
    out = Path(out)
    records = read_records(out / "records.csv")
    missions = {tid: [Mission.from_dict(m) for m in ms]
                for tid, ms in json.loads((out / "missions.json").read_text()).items()}
    sets = [ParameterSet.from_dict(d) for d in json.loads((out / "parameter_sets.json").read_text())]
    return records, missions, sets
