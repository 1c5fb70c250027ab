"""Toy alignment experiment: PVDA against the same run with alpha pinned to 0.

Usage:
    python scripts/alignment_experiment.py --out runs/alignment [--seeds 0,1,2,3,4] [--override k=v ...]

Writes ``alignment.csv`` (one row per seed and arm) and prints medians of
UAV->satellite R@1 / AP, multi-query AP and the linear view-probe accuracy.
"""

import argparse
import csv
import json
import statistics
from pathlib import Path

from pvda.config import apply_overrides, parse_override_list, toy_profile
from pvda.experiment import no_adversary, trial, with_seed, write_manifest

KEYS = ("uav_sat_single/R@1", "uav_sat_single/AP", "uav_sat_multi/AP", "view_probe")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--override", action="append", default=[])
    args = ap.parse_args()

    out = Path(args.out)
    cfg = apply_overrides(toy_profile(), parse_override_list(args.override))
    seeds = [int(s) for s in args.seeds.split(",")]
    write_manifest(out, cfg, "alignment_experiment", extra={"seeds": seeds})

    rows = []
    for seed in seeds:
        run = with_seed(cfg, seed)
        for arm, arm_cfg in (("pvda", run), ("alpha0", no_adversary(run))):
            row = trial(arm_cfg, out / arm / f"seed_{seed}")
            row["arm"] = arm
            rows.append(row)
            print(arm, seed, " ".join(f"{k}={row[k]:.3f}" for k in KEYS), flush=True)

    with open(out / "alignment.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["arm", "seed", *KEYS], extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = {arm: {k: statistics.median(r[k] for r in rows if r["arm"] == arm) for k in KEYS}
               for arm in ("pvda", "alpha0")}
    (out / "alignment_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
