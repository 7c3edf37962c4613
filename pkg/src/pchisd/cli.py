"""Command-line interface: ``pchisd {solve,landscape,sweep,verify}``.

Settings come from defaults, then an optional ``--config`` JSON file, then
explicit flags (flags win).  Every run writes into its own directory with a
config snapshot, a log and the artifacts; an existing directory is only
reused with ``--force``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import checks
from .baselines import SweepRange, basin_sweep
from .hisd import HisdConfig, HisdNonconvergence, gram_schmidt, projection_for, run_pchisd, verify_point
from .landscape import BRANCHING, LANDSCAPE_CONFIG, LandscapeGraph, _point_to_dict, build_landscape
from .objective import HESSIAN_SIZE_CAP
from .problem import PRESETS, make_preset

log = logging.getLogger("pchisd")

CONFIG_SCHEMA = "pchisd.run-config/1"
SADDLE_SCHEMA = "pchisd.saddle/1"
TRACE_SCHEMA = "pchisd.trace/1"
COMMANDS = ("solve", "landscape", "sweep", "verify")

# exit codes
OK, FAILED, USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "solve"
    preset: str = "oned"
    n: int = 64
    lam: float = 0.02
    k: Optional[int] = None  # solve: target index (default 0); landscape: root index (None = auto)
    init: str = "zero"  # zero | <float> | path to .npy/.csv
    sigma: Optional[float] = None
    eps: float = 1e-6
    max_iter: Optional[int] = None  # None: 20000 for solve/sweep, 5000 per landscape run
    dimer_length: Optional[float] = None
    method: str = "gradient"
    range: str = "-10:10:0.01"
    targets: str = "adjacent"
    branching: str = "trailing"
    upward_modes: int = 6
    metric: Optional[str] = None  # None: euclidean for solve/sweep, h1 for landscape
    max_norm: Optional[float] = None
    dedup_tol: float = 1e-4
    max_nodes: int = 500
    max_runs: int = 5000
    reference: Optional[str] = None  # sweep: landscape graph.json to match minima against
    out: Optional[str] = None
    seed: int = 0
    workers: int = 0  # 0 -> os.cpu_count()
    force: bool = False
    inject_fault: Optional[str] = None  # verify only: "gradient-sign"

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.n < 2:
            raise UsageError("--n must be at least 2")
        if not self.lam > 0:
            raise UsageError("--lambda must be positive")
        if self.k is not None and self.k < 0:
            raise UsageError("--k must be non-negative")
        if self.sigma is not None and not self.sigma > 0:
            raise UsageError("--sigma must be positive")
        if not self.eps > 0 or (self.max_iter is not None and self.max_iter < 1):
            raise UsageError("--eps must be positive and --max-iter >= 1")
        if self.dimer_length is not None and not self.dimer_length > 0:
            raise UsageError("--dimer-length must be positive")
        if self.method not in ("gradient", "newton"):
            raise UsageError("--method must be gradient or newton")
        if self.targets not in ("adjacent", "all"):
            raise UsageError("--targets must be adjacent or all")
        if self.branching not in BRANCHING:
            raise UsageError(f"--branching must be one of {', '.join(BRANCHING)}")
        if self.upward_modes < 0:
            raise UsageError("--upward-modes must be >= 0")
        if self.metric not in (None, "euclidean", "h1"):
            raise UsageError("--metric must be euclidean or h1")
        if self.max_norm is not None and not self.max_norm > 0:
            raise UsageError("--max-norm must be positive")
        if self.workers < 0:
            raise UsageError("--workers must be >= 0")
        if self.inject_fault not in (None, "gradient-sign"):
            raise UsageError("--inject-fault accepts only 'gradient-sign'")
        self.sweep_range()

    def sweep_range(self) -> SweepRange:
        try:
            lo, hi, step = (float(x) for x in self.range.split(":"))
        except ValueError:
            raise UsageError(f"--range must look like lo:hi:step, got {self.range!r}")
        try:
            return SweepRange(lo, hi, step)
        except ValueError as exc:
            raise UsageError(f"--range: {exc}")

    def hisd(self, k: int = 0) -> HisdConfig:
        base = LANDSCAPE_CONFIG if self.command == "landscape" else HisdConfig()
        over = {"k": k, "eps": self.eps, "dimer_length": self.dimer_length, "max_norm": self.max_norm}
        if self.max_iter is not None:
            over["max_iter"] = self.max_iter
        if self.metric is not None:
            over["metric"] = self.metric
        return replace(base, **over)

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def default_out(self) -> Path:
        return Path("runs") / f"{self.command}-{self.preset}-N{self.n}-lam{self.lam:g}"


FLAG_DEST = {f.name for f in fields(RunConfig)} - {"command"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with run settings (flags override it)")
    common.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    common.add_argument("--n", type=int, help="intervals per axis (grid spacing 1/N)")
    common.add_argument("--lambda", dest="lam", type=float, help="regularisation weight")
    common.add_argument("--eps", type=float, help="gradient-norm tolerance")
    common.add_argument("--max-iter", dest="max_iter", type=int)
    common.add_argument("--dimer-length", dest="dimer_length", type=float)
    common.add_argument("--metric", choices=("euclidean", "h1"), help="inner product of the saddle dynamics")
    common.add_argument("--max-norm", dest="max_norm", type=float, help="abort a run once |u|_inf exceeds this")
    common.add_argument("--out", help="run directory")
    common.add_argument("--force", action="store_true", help="reuse an existing run directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="thread pool size (0 = all cores)")

    parser = argparse.ArgumentParser(prog="pchisd", description="Saddle dynamics for nonconvex optimal control.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="one saddle search", argument_default=argparse.SUPPRESS)
    p.add_argument("--k", type=int, help="target Morse index")
    p.add_argument("--init", help="zero, a constant, or a .npy/.csv file with u")

    p = sub.add_parser("landscape", parents=[common], help="downward cascade from u = 0",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--k", type=int, help="root index (default: computed)")
    p.add_argument("--sigma", type=float, help="perturbation size")
    p.add_argument("--targets", choices=("adjacent", "all"))
    p.add_argument("--branching", choices=BRANCHING, help="which unstable directions seed the children")
    p.add_argument("--upward-modes", dest="upward_modes", type=int, help="stable modes tried upward from minima")
    p.add_argument("--dedup-tol", dest="dedup_tol", type=float)
    p.add_argument("--max-nodes", dest="max_nodes", type=int)
    p.add_argument("--max-runs", dest="max_runs", type=int)

    p = sub.add_parser("sweep", parents=[common], help="basin sweep over constant initial controls",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--method", choices=("gradient", "newton"))
    p.add_argument("--range", help="lo:hi:step, e.g. --range=-10:10:0.01 (the default)")
    p.add_argument("--reference", help="graph.json whose minima label the outcomes")
    p.add_argument("--dedup-tol", dest="dedup_tol", type=float)

    p = sub.add_parser("verify", parents=[common], help="property checks", argument_default=argparse.SUPPRESS)
    p.add_argument("--inject-fault", dest="inject_fault", choices=("gradient-sign",),
                   help="deliberately break a component to test the checks")
    return parser


def resolve_config(argv=None) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    values: dict = {}
    cfg_path = args.pop("config", None)
    if cfg_path is not None:
        try:
            data = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}")
        data.pop("schema_version", None)
        unknown = set(data) - FLAG_DEST - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(data)
    values.update(args)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# --- run directory ----------------------------------------------------------

def prepare_run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out) if cfg.out else cfg.default_out()
    if out.exists() and any(out.iterdir()):
        if not cfg.force:
            raise UsageError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"schema_version": CONFIG_SCHEMA, **asdict(cfg)}
    (out / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("pchisd").addHandler(handler)
    logging.getLogger("pchisd").setLevel(logging.INFO)
    return out


def write_trace(path: Path, trace) -> None:
    with open(path, "w") as fh:
        fh.write(f"# schema: {TRACE_SCHEMA}\n")
        fh.write("iteration,cost,gradient_norm,beta,gamma\n")
        for row in trace:
            fh.write(",".join(repr(float(x)) if i else str(int(x)) for i, x in enumerate(row)) + "\n")


def load_initial(spec: str, m: int) -> np.ndarray:
    if spec == "zero":
        return np.zeros(m)
    try:
        return np.full(m, float(spec))
    except ValueError:
        pass
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"--init: {spec!r} is neither zero, a number nor a file")
    if path.suffix == ".npy":
        u = np.load(path)
    else:
        data = np.genfromtxt(path, delimiter=",", names=True, comments="#")
        u = np.asarray(data["u"])
    if u.shape != (m,):
        raise UsageError(f"--init: expected {m} values, got {u.shape}")
    return u.astype(float)


# --- commands ---------------------------------------------------------------

def cmd_solve(cfg: RunConfig, out: Path) -> int:
    problem = make_preset(cfg.preset, cfg.n, cfg.lam)
    proj = projection_for(problem)
    u0 = load_initial(cfg.init, problem.m)
    if proj is not None:
        u0 = proj(u0) + problem.constraint.value
    k = cfg.k or 0
    hcfg = cfg.hisd(k)
    V0 = np.zeros((problem.m, 0))
    if k:
        if problem.m <= HESSIAN_SIZE_CAP:
            _, Z = verify_point(problem, u0, hcfg, proj)
            V0 = Z[:, :k]
        else:
            R = np.random.default_rng(cfg.seed).standard_normal((problem.m, k))
            V0 = gram_schmidt(proj(R) if proj is not None else R)
    try:
        point = run_pchisd(problem, u0, V0, hcfg, proj)
    except HisdNonconvergence as exc:
        write_trace(out / "trace.csv", exc.state.trace)
        (out / "report.json").write_text(json.dumps({
            "schema_version": SADDLE_SCHEMA, "status": "nonconverged", "message": str(exc),
            "gradient_norm": exc.state.gradient_norm, "iterations": exc.state.iteration,
        }, indent=1))
        log.error("%s", exc)
        print(f"not converged: {exc}", file=sys.stderr)
        return FAILED
    write_trace(out / "trace.csv", point.trace)
    (out / "saddle.json").write_text(json.dumps({
        "schema_version": SADDLE_SCHEMA, "status": "converged", "problem": problem.describe(),
        **_point_to_dict(point.id, point),
    }, indent=1))
    g = LandscapeGraph(problem=problem.describe())
    g.add_node(point)
    g.write_node_csvs(out / "nodes", problem.grid.coords)
    msg = (f"index-{point.index} point {point.id}: cost {point.cost:.10g}, |g| {point.gradient_norm:.3e}, "
           f"{point.iterations} iterations")
    if proj is not None:
        msg += f", mean(u) {point.u.mean():.3e}"
    log.info(msg)
    print(msg)
    return OK


def cmd_landscape(cfg: RunConfig, out: Path) -> int:
    problem = make_preset(cfg.preset, cfg.n, cfg.lam)

    def progress(graph, node):
        log.info("node %s index %s cost %.10g", node.id, node.index, node.cost)

    graph = build_landscape(
        problem, np.full(problem.m, problem.constraint.value if problem.constraint else 0.0),
        root_k="auto" if cfg.k is None else cfg.k, sigma=cfg.sigma, config=cfg.hisd(),
        targets=cfg.targets, branching=cfg.branching, upward_modes=cfg.upward_modes, max_nodes=cfg.max_nodes, max_runs=cfg.max_runs,
        workers=cfg.n_workers, rel_tol=cfg.dedup_tol, progress=progress,
    )
    graph.to_json(out / "graph.json")
    (out / "graph.dot").write_text(graph.to_dot())
    graph.write_node_csvs(out / "nodes", problem.grid.coords)
    summary = graph.summary()
    summary["sigma"] = cfg.sigma  # None: 0.1 * max(1, |u|_inf) per parent
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"{summary['node_count']} nodes by index {summary['nodes_by_index']}"
          + ("  [truncated]" if graph.truncated else ""))
    for mn in summary["minima"]:
        star = " *" if mn["global_candidate"] else ""
        print(f"  minimum {mn['id']}  cost {mn['cost']:.10g}{star}")
    return OK


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    problem = make_preset(cfg.preset, cfg.n, cfg.lam)
    reference = []
    if cfg.reference:
        g = LandscapeGraph.load_json(cfg.reference)
        reference = [g.nodes[n] for n in g.minima]
    res = basin_sweep(problem, cfg.sweep_range(), cfg.method, cfg.hisd(), reference=reference,
                      rel_tol=cfg.dedup_tol, workers=cfg.n_workers)
    res.write_csv(out / "sweep.csv")
    res.write_summary(out / "summary.json")
    summ = res.summary()
    print(f"{summ['runs']} runs; measure converging to minima {summ['measure_minima']:.4g}, "
          f"to global candidates {summ['measure_global']:.4g}")
    return OK


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    def flipped(problem, u):
        return -checks.adjoint_gradient(problem, u)

    grad_fn = flipped if cfg.inject_fault == "gradient-sign" else checks.adjoint_gradient

    results = checks.run_all(gradient_fn=grad_fn, index_n=cfg.n, seed=cfg.seed,
                             progress=lambda r: print(r.line(), flush=True))
    report = {
        "schema_version": "pchisd.verify/1",
        "inject_fault": cfg.inject_fault,
        "passed": all(r.passed for r in results),
        "checks": [asdict(r) for r in results],
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    return OK if report["passed"] else FAILED


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
        out = prepare_run_dir(cfg)
    except UsageError as exc:
        print(f"pchisd: error: {exc}", file=sys.stderr)
        return USAGE
    handler = {"solve": cmd_solve, "landscape": cmd_landscape, "sweep": cmd_sweep, "verify": cmd_verify}
    return handler[cfg.command](cfg, out)


if __name__ == "__main__":
    sys.exit(main())
