"""Control landscapes of the 1D problem for several lambda (runs/oned-*).

    python scripts/oned_landscapes.py --n 256 --lambdas 0.02 0.005
"""
import argparse
import sys

from pchisd import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.02, 0.005])
    ap.add_argument("--max-norm", type=float, default=8.0)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    status = 0
    for lam in args.lambdas:
        argv = ["landscape", "--preset", "oned", "--n", str(args.n), "--lambda", str(lam),
                "--max-norm", str(args.max_norm), "--out", f"{args.out}/oned-N{args.n}-lam{lam:g}"]
        status |= cli.main(argv + (["--force"] if args.force else []))
    return status


if __name__ == "__main__":
    sys.exit(main())
