"""Regenerate the reference search log used by the end-to-end acceptance test.

    python scripts/make_golden.py

Runs ``voxnas gen`` and ``voxnas search`` with the desk-scale settings and
copies the resulting log to tests/golden/desk_search_log.csv. Only rerun this
after an intentional change to training or search behaviour.
"""

import shutil
import sys
import tempfile
from pathlib import Path

from voxnas.cli import main

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "golden"
GEN_ARGS = ["--classes", "4", "--per-class", "50", "--grid", "16", "--seed", "42"]


def run(workdir):
    data, out = Path(workdir) / "data", Path(workdir) / "run"
    if main(["gen", *GEN_ARGS, "--out", str(data)]) != 0:
        sys.exit("dataset generation failed")
    if main(["-v", "search", "--data", str(data), "--out", str(out), "--config", str(GOLDEN / "desk.cfg")]) != 0:
        sys.exit("search failed")
    return out


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        out = run(tmp)
        shutil.copy(out / "search_log.csv", GOLDEN / "desk_search_log.csv")
        shutil.copy(out / "summary.txt", GOLDEN / "desk_summary.txt")
    print(f"wrote {GOLDEN / 'desk_search_log.csv'}")
