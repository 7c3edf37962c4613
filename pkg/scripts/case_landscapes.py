"""Landscapes of the 2D cases (symmetric, asymmetric, constrained).

Defaults follow the 2D experiments: h = 1/32 and lambda in {0.01, 0.005, 0.002}.
Expect tens of minutes per case at the smaller lambda.
"""
import argparse
import sys

from pchisd import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cases", nargs="+", default=["case1", "case2", "case3"])
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.01, 0.005, 0.002])
    ap.add_argument("--max-norm", type=float, default=10.0)
    ap.add_argument("--max-nodes", type=int, default=500)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()
    status = 0
    for case in args.cases:
        for lam in args.lambdas:
            argv = ["landscape", "--preset", case, "--n", str(args.n), "--lambda", str(lam),
                    "--max-norm", str(args.max_norm), "--max-nodes", str(args.max_nodes),
                    "--out", f"{args.out}/{case}-N{args.n}-lam{lam:g}"]
            status |= cli.main(argv + (["--force"] if args.force else []))
    return status


if __name__ == "__main__":
    sys.exit(main())
