#!/usr/bin/env python3
"""Lambda1 sweep with one independent `metatrans train` process per grid point.

    python scripts/sweep_parallel.py --data runs/data --jobs 4 --out runs/sweep

Each grid point gets its own output directory; the collected table goes to
<out>/sweep.csv. Selection uses the target-eval accuracy, smaller lambda1 on ties.
"""
import argparse
import csv
import json
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

GRID = [0.0] + [round(0.01 * i, 2) for i in range(1, 11)]


def run_point(lam, args):
    out = Path(args.out) / f"lambda_{lam:g}"
    cmd = [sys.executable, "-m", "metatrans.cli", "train", "--variant", "full",
           "--lambda1", repr(lam), "--seed", str(args.seed), "--out", str(out)]
    if args.data:
        cmd += ["--data", args.data]
    if args.config:
        cmd += ["--config", args.config]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"lambda1={lam}: exit {proc.returncode}\n{proc.stderr}")
    final = json.loads((out / "report.json").read_text())["final"]
    return {"lambda1": lam, "target_acc": final["target_acc"], "source_acc": final["source_acc"]}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=float, nargs="+", default=GRID)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()
    Path(args.out).mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(lambda lam: run_point(lam, args), args.grid))
    best = min(rows, key=lambda r: (-r["target_acc"], r["lambda1"]))
    with open(Path(args.out) / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lambda1", "target_acc", "source_acc", "selected"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "selected": int(r is best)})
    for r in rows:
        print(f"lambda1={r['lambda1']:<5g} target_acc={r['target_acc']:.2f}"
              + ("  <- best" if r is best else ""))


if __name__ == "__main__":
    main()
