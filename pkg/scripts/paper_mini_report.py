"""Run (or resume) the bundled 1,500-trial campaign and print per-PS statistics and correlations.

Example:
    python scripts/paper_mini_report.py --out runs/mini --workers 1
"""
import argparse
import math
import sys
from pathlib import Path

from pcnav.analytics import PopulationFilter, correlation_report, population_stats, rank_population
from pcnav.campaign import paper_mini, run_campaign


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/paper_mini")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args(argv)

    cfg = paper_mini()
    cfg.workers = args.workers
    out = Path(args.out)

    def progress(k, n, rec):
        if k % 100 == 0 or k == n:
            print(f"  {k}/{n}", file=sys.stderr, flush=True)

    recs = run_campaign(cfg, out, progress=progress)
    euclid = cfg.euclid
    allst = population_stats(recs)
    print(f"all: n={allst.n} SR={allst.sr:.3f} dx_median={allst.delta_x.median:.2f} "
          f"pt_median={allst.planning_time.median:.3f}s")
    print("ps,SR,dx_median,dx_iqr,pt_median,rank")
    for ps in cfg.parameter_sets:
        st = population_stats(recs, PopulationFilter(include={"ps_id": {ps.name}}))
        r = rank_population(st, euclid) if st.successes else math.nan
        print(f"{ps.name},{st.sr:.3f},{st.delta_x.median:.2f},{st.delta_x.iqr:.2f},"
              f"{st.planning_time.median:.4f},{r:.3f}")
    rep = correlation_report(recs, cfg.parameter_sets)
    print()
    for row in rep.rows():
        print(",".join(row[:1] + tuple(f"{v:+.3f}" if isinstance(v, float) else v for v in row[1:])))


if __name__ == "__main__":
    main()
