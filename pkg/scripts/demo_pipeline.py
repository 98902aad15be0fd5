#!/usr/bin/env python3
"""End-to-end smoke run: dataset -> training -> evaluation -> aggregation.

Small enough for a coffee-break check on one core (about a minute);
artifacts land under --work-dir for inspection.
"""
import argparse
import sys
from pathlib import Path

from pdseg.cli import main as pdseg


def run(argv) -> None:
    print("+ pdseg " + " ".join(argv))
    rc = pdseg(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", default="demo_out")
    ap.add_argument("--iterations", type=int, default=300)
    ap.add_argument("--image-size", type=int, default=48)
    args = ap.parse_args()

    work = Path(args.work_dir)
    data = work / "data"
    run_dir = work / "run"

    run(["gen-data", "--out-dir", str(data), "--num-train", "12",
         "--num-test", "6", "--image-size", str(args.image_size),
         "--num-classes", "6", "--profiles", "sharp", "smooth", "quantized"])
    run(["train", "--manifest", str(data / "manifest.txt"),
         "--out-dir", str(run_dir), "--iterations", str(args.iterations),
         "--eval-interval", str(max(args.iterations // 3, 1)),
         "--base-width", "16", "--crop-size", "48"])
    run(["eval", "--manifest", str(data / "manifest.txt"),
         "--checkpoint", str(run_dir / "checkpoint.ckpt"),
         "--out-dir", str(run_dir), "--multiscale"])
    maps = sorted(str(p) for p in data.glob("test_00000_pd_*.pfm"))
    run(["aggregate", *maps, "--params", str(run_dir / "checkpoint.ckpt"),
         "--out-dir", str(run_dir), "--out", "fused_test0"])
    print(f"artifacts under {work}/")


if __name__ == "__main__":
    main()
