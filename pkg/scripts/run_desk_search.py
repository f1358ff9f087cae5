"""Generate a desk-scale dataset and run one search on it.

    python scripts/run_desk_search.py --out runs/desk [--classes 4 --grid 16 --K 2 --D 2]

Prints the summary and the evaluation of both checkpoints on the test split.
"""

import argparse
import sys
from pathlib import Path

from voxnas.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--K", type=int, default=2)
    p.add_argument("--D", type=int, default=2)
    p.add_argument("--finetune-epochs", type=int, default=10)
    return p.parse_args()


def check(code):
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    a = parse_args()
    data, run = a.out / "data", a.out / "search"
    if not (data / "manifest.txt").exists():
        check(main(["gen", "--classes", str(a.classes), "--per-class", str(a.per_class),
                    "--grid", str(a.grid), "--seed", str(a.seed), "--out", str(data)]))
    check(main(["-v", "search", "--data", str(data), "--out", str(run), "--K", str(a.K), "--D", str(a.D),
                "--finetune-epochs", str(a.finetune_epochs), "--seed", str(a.seed)]))
    for name in ("initial", "best"):
        print(f"{name}: ", end="", flush=True)
        check(main(["eval", "--checkpoint", str(run / f"{name}.ckpt"), "--data", str(data), "--split", "test"]))
