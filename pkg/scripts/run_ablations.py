#!/usr/bin/env python3
"""Train the full ablation grids on the reference synthetic benchmark.

Writes one CSV per grid under --out-dir.  The depth-source grid alone
is thirty-five runs of 2000 iterations; expect roughly half an hour per
grid on one core.
"""
import argparse
import sys
from pathlib import Path

from pdseg.ablate import GRID_NAMES
from pdseg.cli import main as pdseg


def run(argv) -> None:
    print("+ pdseg " + " ".join(argv))
    rc = pdseg(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="ablation_out")
    ap.add_argument("--grids", nargs="+", default=list(GRID_NAMES),
                    choices=list(GRID_NAMES))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int, default=2000)
    args = ap.parse_args()

    out = Path(args.out_dir)
    data = out / "data"
    if not (data / "manifest.txt").exists():
        run(["gen-data", "--out-dir", str(data), "--num-train", "40",
             "--num-test", "20", "--image-size", "64", "--num-classes", "6",
             "--profiles", "sharp", "smooth", "quantized", "sensor"])
    for grid in args.grids:
        run(["ablate", "--manifest", str(data / "manifest.txt"),
             "--grid", grid, "--grid-seeds", *[str(s) for s in args.seeds],
             "--iterations", str(args.iterations), "--out-dir", str(out)])
    print(f"grid CSVs under {out}/")


if __name__ == "__main__":
    main()
