"""Sweep beam width and depth limit on a synthetic dataset and print a table.

    python scripts/run_sweep.py --out runs/sweep --K-list 1,2,3 --D-list 1..5

Defaults are sized for a laptop; the full 3x5 grid at grid 16 takes on the
order of an hour.
"""

import argparse
import csv
import sys
from pathlib import Path

from voxnas.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--K-list", default="1,2")
    p.add_argument("--D-list", default="1..3")
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--max-expansions", type=int, default=20)
    return p.parse_args()


if __name__ == "__main__":
    a = parse_args()
    data, out = a.out / "data", a.out / "sweep"
    if not (data / "manifest.txt").exists():
        code = main(["gen", "--classes", str(a.classes), "--per-class", str(a.per_class), "--grid", str(a.grid),
                     "--seed", str(a.seed), "--out", str(data)])
        if code:
            sys.exit(code)
    code = main(["-v", "sweep", "--data", str(data), "--out", str(out), "--K-list", a.K_list, "--D-list", a.D_list,
                 "--finetune-epochs", str(a.finetune_epochs), "--max-expansions", str(a.max_expansions),
                 "--seed", str(a.seed)])
    if code:
        sys.exit(code)
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    print(f"\n{'K':>2} {'D':>2} {'train':>7} {'test':>7} {'params':>10} {'sec':>8}")
    for r in rows:
        print(f"{r['K']:>2} {r['D']:>2} {float(r['train_acc']):7.4f} {float(r['test_acc']):7.4f} "
              f"{int(r['param_count']):>10} {float(r['seconds']):8.1f}")
