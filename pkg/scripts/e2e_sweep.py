"""Train several controllers over seeds on synthetic grids and summarise final metrics.

    python scripts/e2e_sweep.py --grid 2x2 --controllers dqn,ap_dqn --seeds 0,1 --out runs/sweep
"""

import argparse
import csv
import json
import time
from pathlib import Path

import numpy as np

from bctlight.harness import CONTROLLERS, DemandSpec, ExperimentConfig, train
from bctlight.simcore import SimConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--grid", default="1x1")
    ap.add_argument("--controllers", default="fixedtime,maxpressure,dqn,ap_dqn,bct_aplight")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--episode-seconds", type=float, default=1800)
    ap.add_argument("--ns-rate", type=float, default=0.2)
    ap.add_argument("--ew-rate", type=float, default=0.07)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    grid = tuple(int(v) for v in args.grid.lower().split("x"))
    controllers = [c for c in args.controllers.split(",") if c]
    bad = set(controllers) - set(CONTROLLERS)
    if bad:
        ap.error(f"unknown controllers {sorted(bad)}")
    base = ExperimentConfig(grid=grid, episodes=args.episodes, sim=SimConfig(episode_seconds=args.episode_seconds),
                            demand=DemandSpec(args.ns_rate, args.ew_rate))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for ctl in controllers:
            t0 = time.perf_counter()
            rep = train(base.replace(controller=ctl, seed=seed, out=str(out / f"{ctl}_seed{seed}")))
            row = {"controller": ctl, "seed": seed, **rep.final, "reject_rate": rep.ct["reject_rate"],
                   "override_rate": rep.ct["override_rate"], "seconds": round(time.perf_counter() - t0, 1)}
            rows.append(row)
            print(json.dumps(row), flush=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"\n{'controller':<12} {'ATT':>14} {'reward':>16}")
    for ctl in controllers:
        att = np.array([r["att"] for r in rows if r["controller"] == ctl])
        rew = np.array([r["reward"] for r in rows if r["controller"] == ctl])
        print(f"{ctl:<12} {att.mean():8.2f}±{att.std():5.2f} {rew.mean():9.1f}±{rew.std():6.1f}")


if __name__ == "__main__":
    main()
