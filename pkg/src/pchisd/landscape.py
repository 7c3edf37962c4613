"""Control landscape: downward/upward searches and the pathway graph."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .hisd import (
    HisdConfig,
    HisdNonconvergence,
    SaddlePoint,
    finalize,
    init_state,
    projection_for,
    run_pchisd,
    verify_point,
)
from .pde_solvers import SolverError
from .problem import Problem

log = logging.getLogger(__name__)

LANDSCAPE_SCHEMA = "pchisd.landscape/1"
NODE_CSV_SCHEMA = "pchisd.node-fields/1"


class NotStationaryError(ValueError):
    pass


# Searches started from saddles: h1 metric with a generous BB clamp and an
# inf-norm step cap.  Fixed points are those of the plain scheme; see hisd.
LANDSCAPE_CONFIG = HisdConfig(metric="h1", beta_max=100.0, max_step=0.1, max_iter=5000)


def dedup_match(a: np.ndarray, b: np.ndarray, rel_tol: float = 1e-4) -> bool:
    """``|a - b| <= rel_tol * max(1, |a|)`` in the Euclidean norm."""
    return bool(np.linalg.norm(a - b) <= rel_tol * max(1.0, np.linalg.norm(a)))


def default_sigma(u: np.ndarray) -> float:
    return 0.1 * max(1.0, float(np.abs(u).max(initial=0.0)))


@dataclass
class Edge:
    parent: str
    child: str
    direction: int  # 1-based index into the parent's unstable directions
    sign: int
    sigma: float
    target_index: int


@dataclass
class BranchReport:
    parent: str
    target_index: int
    direction: int
    sign: int
    status: str  # converged | duplicate | rejected | nonconverged | failed
    child: Optional[str] = None
    message: str = ""
    iterations: int = 0


@dataclass
class LandscapeGraph:
    nodes: dict = field(default_factory=dict)  # id -> SaddlePoint
    edges: list = field(default_factory=list)
    root: Optional[str] = None
    # the cascade root plus saddles found by upward searches
    roots: list = field(default_factory=list)
    truncated: bool = False
    branches: list = field(default_factory=list)
    problem: dict = field(default_factory=dict)
    grid_coords: Optional[np.ndarray] = None
    rel_tol: float = 1e-4

    def find(self, u: np.ndarray) -> Optional[str]:
        for nid, node in self.nodes.items():
            if dedup_match(node.u, u, self.rel_tol):
                return nid
        return None

    def add_node(self, point: SaddlePoint) -> tuple[str, bool]:
        """Insert unless a matching node exists; returns ``(id, is_new)``."""
        existing = self.find(point.u)
        if existing is not None:
            return existing, False
        nid = point.id
        self.nodes[nid] = point
        return nid, True

    def add_edge(self, edge: Edge) -> bool:
        if edge.parent == edge.child:
            return False
        for e in self.edges:
            if (e.parent, e.child) == (edge.parent, edge.child):
                return False
        self.edges.append(edge)
        return True

    @property
    def minima(self) -> list:
        return [nid for nid, n in self.nodes.items() if n.index == 0]

    def global_minima(self, rtol: float = 1e-8) -> list:
        mins = self.minima
        if not mins:
            return []
        best = min(self.nodes[n].cost for n in mins)
        return [n for n in mins if self.nodes[n].cost <= best + rtol * max(1.0, abs(best))]

    def count_by_index(self) -> dict:
        counts: dict = {}
        for n in self.nodes.values():
            counts[n.index] = counts.get(n.index, 0) + 1
        return dict(sorted(counts.items(), key=lambda kv: (kv[0] is None, kv[0])))

    def summary(self) -> dict:
        glob = set(self.global_minima())
        return {
            "schema_version": "pchisd.summary/1",
            "problem": self.problem,
            "root": self.root,
            "truncated": self.truncated,
            "node_count": len(self.nodes),
            "edge_count": len(self.edges),
            "nodes_by_index": {str(k): v for k, v in self.count_by_index().items()},
            "minima": [
                {"id": n, "cost": self.nodes[n].cost, "global_candidate": n in glob}
                for n in sorted(self.minima, key=lambda n: (self.nodes[n].cost, n))
            ],
            "nodes": [
                {"id": nid, "index": p.index, "cost": p.cost, "flags": list(p.flags)}
                for nid, p in sorted(self.nodes.items(), key=lambda kv: (-(kv[1].index or 0), kv[1].cost))
            ],
            "branches": {
                status: sum(1 for b in self.branches if b.status == status)
                for status in sorted({b.status for b in self.branches})
            },
        }

    # --- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": LANDSCAPE_SCHEMA,
            "problem": self.problem,
            "root": self.root,
            "roots": self.roots,
            "truncated": self.truncated,
            "rel_tol": self.rel_tol,
            "nodes": [_point_to_dict(nid, p) for nid, p in self.nodes.items()],
            "edges": [vars(e).copy() for e in self.edges],
            "branches": [vars(b).copy() for b in self.branches],
            "minima": self.minima,
            "global_minima": self.global_minima(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LandscapeGraph":
        if data.get("schema_version") != LANDSCAPE_SCHEMA:
            raise ValueError(f"unsupported schema {data.get('schema_version')!r}")
        graph = cls(
            root=data["root"], roots=list(data["roots"]), truncated=data["truncated"], problem=data["problem"],
            rel_tol=data.get("rel_tol", 1e-4),
        )
        for nd in data["nodes"]:
            graph.nodes[nd["id"]] = _point_from_dict(nd)
        graph.edges = [Edge(**e) for e in data["edges"]]
        graph.branches = [BranchReport(**b) for b in data["branches"]]
        return graph

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load_json(cls, path) -> "LandscapeGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dot(self) -> str:
        lines = [f"// schema: {LANDSCAPE_SCHEMA}", "digraph landscape {", "  rankdir=TB;"]
        glob = set(self.global_minima())
        for nid, p in self.nodes.items():
            style = ', style=filled, fillcolor="lightblue"' if nid in glob else ""
            lines.append(f'  "{nid}" [label="index-{p.index} / J={p.cost:.6g}"{style}];')
        for e in self.edges:
            sign = "+" if e.sign > 0 else "-"
            lines.append(f'  "{e.parent}" -> "{e.child}" [label="{sign}v{e.direction}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def write_node_csvs(self, directory, coords: np.ndarray) -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        names = ["x"] if coords.shape[1] == 1 else ["x1", "x2"]
        for nid, p in self.nodes.items():
            cols = [coords[:, j] for j in range(coords.shape[1])] + [p.u]
            header = names + ["u"]
            if p.y is not None:
                cols.append(p.y)
                header.append("y")
            path = directory / f"{nid}.csv"
            with open(path, "w") as fh:
                fh.write(f"# schema: {NODE_CSV_SCHEMA}\n")
                np.savetxt(fh, np.column_stack(cols), delimiter=",", header=",".join(header),
                           comments="", fmt="%.17g")
            written.append(path)
        return written


def _point_to_dict(nid: str, p: SaddlePoint) -> dict:
    return {
        "id": nid,
        "index": p.index,
        "index_bounds": list(p.index_bounds),
        "verified": p.verified,
        "target_index": p.target_index,
        "cost": p.cost,
        "gradient_norm": p.gradient_norm,
        "iterations": p.iterations,
        "flags": list(p.flags),
        "provenance": p.provenance,
        "eigenvalues": np.asarray(p.eigenvalues).tolist(),
        "u": np.asarray(p.u).tolist(),
        "y": None if p.y is None else np.asarray(p.y).tolist(),
        "directions": np.asarray(p.directions).T.tolist(),
    }


def _point_from_dict(nd: dict) -> SaddlePoint:
    u = np.asarray(nd["u"], dtype=float)
    dirs = np.asarray(nd["directions"], dtype=float).reshape(-1, u.size).T
    return SaddlePoint(
        u=u, index=nd["index"], cost=nd["cost"], gradient_norm=nd["gradient_norm"],
        directions=dirs, eigenvalues=np.asarray(nd["eigenvalues"], dtype=float),
        index_bounds=tuple(nd["index_bounds"]), verified=nd["verified"],
        target_index=nd["target_index"],
        y=None if nd["y"] is None else np.asarray(nd["y"], dtype=float),
        iterations=nd["iterations"], provenance=nd["provenance"], flags=list(nd["flags"]),
    )


# --- searches -----------------------------------------------------------

def stationary_point(problem: Problem, u: np.ndarray, config: HisdConfig, k: Optional[int] = None) -> SaddlePoint:
    """Wrap an already stationary control as a verified :class:`SaddlePoint`.

    ``k=None`` determines the Morse index from the dense Hessian.
    """
    projection = projection_for(problem)
    cfg = config.with_k(0)
    state = init_state(problem, u, np.zeros((problem.m, 0)), cfg, projection)
    if state.gradient_norm >= config.eps:
        raise NotStationaryError(
            f"control is not stationary (|g| = {state.gradient_norm:.3e} >= {config.eps:.1e}); "
            "run a saddle search first"
        )
    point = finalize(problem, state, config.with_k(0 if k is None else k), projection)
    if k is None and point.verified:
        point.target_index = point.index
        point.flags = [f for f in point.flags if f != "index-mismatch"]
    return point


def _search(problem, parent_id, seed, V0, r, config, projection, direction, sign, sigma):
    prov = {"parent": parent_id, "direction": direction, "sign": sign, "sigma": sigma, "target_index": r}
    report = BranchReport(parent=parent_id, target_index=r, direction=direction, sign=sign, status="converged")
    try:
        point = run_pchisd(problem, seed, V0, config.with_k(r), projection, provenance=prov)
        report.iterations = point.iterations
        return point, report
    except HisdNonconvergence as exc:
        report.status, report.message = "nonconverged", str(exc)
        report.iterations = exc.state.iteration
    except (SolverError, FloatingPointError, ValueError) as exc:
        report.status, report.message = "failed", f"{type(exc).__name__}: {exc}"
    return None, report


def _run_branches(tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda t: _search(*t), tasks))
    return [_search(*t) for t in tasks]


def _dedup_list(points, rel_tol):
    out = []
    for p in points:
        if not any(dedup_match(q.u, p.u, rel_tol) for q in out):
            out.append(p)
    return out


def _choose_directions(parent: SaddlePoint, i: int, r: int) -> np.ndarray:
    """``r`` lowest-eigenvalue unstable directions other than column ``i``."""
    cols = [j for j in range(parent.directions.shape[1]) if j != i][:r]
    return parent.directions[:, cols]


BRANCHING = ("leading", "trailing", "all")


def branch_directions(k: int, r: int, branching: str = "trailing") -> list:
    """0-based columns ``i`` of the parent's directions used as perturbations.

    ``"leading"``: ``v_1 .. v_r`` (``v_1`` alone when ``r = 0``), initial
    directions are the ``r`` lowest others.  ``"trailing"``: ``v_{r+1} .. v_k``,
    the directions the child is meant to descend, initial directions are
    ``v_1 .. v_r``.  ``"all"``: every ``v_i``.
    """
    if branching == "leading":
        return list(range(max(r, 1)))
    if branching == "trailing":
        return list(range(r, k))
    if branching == "all":
        return list(range(k))
    raise ValueError(f"branching must be one of {BRANCHING}")


def downward_tasks(problem, parent: SaddlePoint, r: int, sigma, config, parent_id=None,
                   branching: str = "trailing"):
    k = parent.index
    if not parent.verified or k is None or not 0 <= r < k:
        raise ValueError(f"need a verified parent with index > {r}")
    sigma = default_sigma(parent.u) if sigma is None else sigma
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    projection = projection_for(problem)
    pid = parent_id or parent.id
    tasks = []
    for i in branch_directions(k, r, branching):
        V0 = _choose_directions(parent, i, r)
        for sign in (1, -1):
            seed = parent.u + sign * sigma * parent.directions[:, i]
            tasks.append((problem, pid, seed, V0, r, config, projection, i + 1, sign, sigma))
    return tasks


def downward_search(problem: Problem, parent: SaddlePoint, r: int, sigma: Optional[float] = None,
                    config: HisdConfig = LANDSCAPE_CONFIG, workers: int = 1, rel_tol: float = 1e-4,
                    reports: Optional[list] = None, branching: str = "trailing") -> list:
    """Index-``r`` searches seeded at ``parent.u +- sigma v_i``.

    The perturbed directions ``v_i`` follow ``branching`` (see
    :func:`branch_directions`).  Returns deduplicated converged children; a
    child whose verified index differs from ``r`` is kept and flagged
    ``index-mismatch``.
    """
    tasks = downward_tasks(problem, parent, r, sigma, config, branching=branching)
    results = _run_branches(tasks, workers)
    if reports is not None:
        reports.extend(rep for _, rep in results)
    return _dedup_list([p for p, _ in results if p is not None], rel_tol)


def upward_tasks(problem, point: SaddlePoint, r: int, sigma, config, modes=None, spectrum=None):
    j = point.index
    if not point.verified or j is None:
        raise ValueError("upward search needs a verified point")
    if not j < r <= point.u.size:
        raise ValueError(f"target index {r} must lie in ({j}, m]")
    projection = projection_for(problem)
    sigma = default_sigma(point.u) if sigma is None else sigma
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w, Z = spectrum if spectrum is not None else verify_point(problem, point.u, config, projection)
    modes = [j] if modes is None else list(modes)
    tasks = []
    for i in modes:
        if i < j or i >= Z.shape[1]:
            raise ValueError(f"mode {i} is not a stable direction")
        # climb along mode i, keep the r - 1 lowest other eigenvectors
        others = [c for c in range(Z.shape[1]) if c != i][: r - 1]
        V0 = Z[:, sorted(others + [i])]
        for sign in (1, -1):
            seed = point.u + sign * sigma * Z[:, i]
            tasks.append((problem, point.id, seed, V0, r, config, projection, i + 1, sign, sigma))
    return tasks


def upward_search(problem: Problem, point: SaddlePoint, r: int, sigma: Optional[float] = None,
                  config: HisdConfig = LANDSCAPE_CONFIG, modes=None, workers: int = 1,
                  rel_tol: float = 1e-4, reports: Optional[list] = None) -> list:
    """Climb from an index-``j`` point to index ``r > j``.

    Seeds are ``u +- sigma z_i`` for the Hessian eigenvectors ``z_i`` listed in
    ``modes`` (0-based, ascending eigenvalue; default: only ``z_j``, the
    softest stable one).  Initial directions are ``z_i`` plus the ``r - 1``
    lowest other eigenvectors.  ``r == j`` returns ``[point]``.
    """
    if point.verified and r == point.index:
        return [point]
    tasks = upward_tasks(problem, point, r, sigma, config, modes)
    results = _run_branches(tasks, workers)
    if reports is not None:
        reports.extend(rep for _, rep in results)
    return _dedup_list([p for p, _ in results if p is not None], rel_tol)


def mirror_point(problem: Problem, point: SaddlePoint, config: HisdConfig) -> Optional[SaddlePoint]:
    """The image of ``point`` under ``u -> -u``, re-evaluated and re-verified.

    Only meaningful for problems whose cost is even in ``u``.  Returns None
    when the mirrored control is not stationary within ``eps`` or its verified
    index differs (i.e. the problem is not actually symmetric there).
    """
    try:
        mirror = stationary_point(problem, -point.u, config.with_k(point.index or 0), point.index)
    except NotStationaryError:
        return None
    if point.verified and mirror.index != point.index:
        return None
    mirror.target_index = point.target_index
    mirror.iterations = point.iterations
    mirror.flags = sorted(set(mirror.flags) | {"mirror"})
    mirror.provenance = {"mirror_of": point.id}
    return mirror


def build_landscape(problem: Problem, root_u: np.ndarray, root_k="auto", sigma: Optional[float] = None,
                    config: HisdConfig = LANDSCAPE_CONFIG, targets: str = "adjacent", upward_modes: int = 6,
                    max_nodes: int = 500, max_runs: int = 5000, workers: int = 1,
                    rel_tol: float = 1e-4, branching: str = "trailing", symmetric: Optional[bool] = None,
                    progress=None) -> LandscapeGraph:
    """Breadth-first downward cascade from a stationary root.

    ``targets="adjacent"`` searches index ``k-1`` from every index-``k``
    node; ``"all"`` searches every ``r < k``; ``branching`` picks the
    perturbed directions (:func:`branch_directions`).  With ``upward_modes > 0``
    every minimum is then climbed to index 1 along its ``upward_modes``
    lowest eigenvectors; new index-1 saddles become extra roots and are
    cascaded down again, until no new node appears.  Budget exhaustion
    returns the partial graph with ``truncated=True``.

    ``symmetric`` (default: ``problem.symmetric``) exploits an even cost:
    every new node's mirror ``-u`` is verified and inserted, only one node
    of each mirror pair is expanded, and edges are mirrored with flipped
    perturbation signs.
    """
    if branching not in BRANCHING:
        raise ValueError(f"branching must be one of {BRANCHING}")
    if targets not in ("adjacent", "all"):
        raise ValueError("targets must be 'adjacent' or 'all'")
    if upward_modes < 0:
        raise ValueError("upward_modes must be >= 0")
    k = None if root_k == "auto" else int(root_k)
    root = stationary_point(problem, root_u, config, k)
    graph = LandscapeGraph(problem=problem.describe(), grid_coords=problem.grid.coords, rel_tol=rel_tol)
    root_id, _ = graph.add_node(root)
    graph.root = root_id
    graph.roots = [root_id]
    root.provenance = {"root": True}
    symmetric = problem.symmetric if symmetric is None else symmetric
    mirror_of = {}
    if symmetric:
        twin = graph.find(-root.u)
        if twin is not None:
            mirror_of[root_id] = root_id

    runs = 0
    down = [root_id]
    up = []
    expanded = set()
    climbed = set()

    def budget(tasks):
        nonlocal runs
        if runs + len(tasks) > max_runs:
            graph.truncated = True
            tasks = tasks[: max(0, max_runs - runs)]
        runs += len(tasks)
        return tasks

    def accept(point, report, parent_index):
        """Insert a converged branch result; returns the node id or None."""
        if point.index is not None and parent_index is not None and point.index >= parent_index:
            report.status = "rejected"
            report.message = f"converged to index {point.index} >= parent index {parent_index}"
            return None
        if len(graph.nodes) >= max_nodes and graph.find(point.u) is None:
            graph.truncated = True
            report.status = "rejected"
            report.message = "node budget exhausted"
            return None
        cid, new = graph.add_node(point)
        report.child = cid
        if not new:
            report.status = "duplicate"
            return cid
        node = graph.nodes[cid]
        (down if node.index else up).append(cid)
        if progress is not None:
            progress(graph, node)
        if symmetric:
            twin = graph.find(-node.u)
            if twin is None:
                image = mirror_point(problem, node, config)
                if image is not None:
                    twin, _ = graph.add_node(image)
                    if progress is not None:
                        progress(graph, image)
            if twin is not None:
                mirror_of[cid], mirror_of[twin] = twin, cid
        return cid

    def link(parent_id, child_id, report, r, sigma_used):
        graph.add_edge(Edge(parent_id, child_id, report.direction, report.sign, sigma_used, r))
        mp, mc = mirror_of.get(parent_id), mirror_of.get(child_id)
        if mp is not None and mc is not None:
            graph.add_edge(Edge(mp, mc, report.direction, -report.sign, sigma_used, r))

    while (down or up) and not (graph.truncated and runs >= max_runs):
        if down:
            # highest index first, then discovery order
            down.sort(key=lambda nid: -(graph.nodes[nid].index or 0))
            nid = down.pop(0)
            if nid in expanded:
                continue
            expanded.add(nid)
            parent = graph.nodes[nid]
            if not parent.verified or not parent.index:
                continue
            levels = [parent.index - 1] if targets == "adjacent" else list(range(parent.index - 1, -1, -1))
            for r in levels:
                tasks = budget(downward_tasks(problem, parent, r, sigma, config, nid, branching))
                for point, report in _run_branches(tasks, workers):
                    graph.branches.append(report)
                    if point is None:
                        continue
                    cid = accept(point, report, parent.index)
                    if cid is not None:
                        link(nid, cid, report, r, tasks[0][-1])
            continue

        nid = up.pop(0)
        if nid in climbed or upward_modes == 0:
            continue
        climbed.add(nid)
        point = graph.nodes[nid]
        if not point.verified or point.index != 0:
            continue
        modes = range(min(upward_modes, point.u.size))
        tasks = budget(upward_tasks(problem, point, 1, sigma, config, modes))
        for saddle, report in _run_branches(tasks, workers):
            report.target_index = 1
            graph.branches.append(report)
            if saddle is None:
                continue
            if not saddle.index:
                report.status = "rejected"
                report.message = "upward search ended at a minimum"
                continue
            cid = accept(saddle, report, None)
            if cid is not None and report.status != "duplicate":
                for rid in {cid, mirror_of.get(cid, cid)}:
                    graph.nodes[rid].flags.append("upward")
                    graph.roots.append(rid)
    log.info("landscape: %d nodes, %d edges, %d runs", len(graph.nodes), len(graph.edges), runs)
    return graph
