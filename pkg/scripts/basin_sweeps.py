"""Domains of convergence of BB gradient descent and Newton-KKT from constant controls.

Writes one sweep directory per (method, lambda) and prints the segment table.
The full grid -10:10:0.01 is 2001 runs per sweep; use --step for a coarser pass.
"""
import argparse
import json
import sys
from pathlib import Path

from pchisd import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.02, 0.005, 0.0005])
    ap.add_argument("--methods", nargs="+", default=["gradient", "newton"])
    ap.add_argument("--step", type=float, default=0.01)
    ap.add_argument("--reference", help="graph.json of a landscape to label the minima")
    ap.add_argument("--out", default="runs")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    status = 0
    for method in args.methods:
        for lam in args.lambdas:
            out = Path(args.out) / f"sweep-{method}-N{args.n}-lam{lam:g}"
            argv = ["sweep", "--preset", "oned", "--n", str(args.n), "--lambda", str(lam), "--method", method,
                    f"--range=-10:10:{args.step}", "--out", str(out)]
            if args.reference:
                argv += ["--reference", args.reference]
            status |= cli.main(argv + (["--force"] if args.force else []))
            if (out / "summary.json").exists():
                summ = json.loads((out / "summary.json").read_text())
                for seg in summ["segments"]:
                    print(f"  [{seg['lo']:7.2f}, {seg['hi']:7.2f}]  {seg['outcome']}")
    return status


if __name__ == "__main__":
    sys.exit(main())
