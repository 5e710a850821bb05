"""Binary pairwise MRF: energy evaluation and exact MAP inference.

The energy is sum of per-node label costs plus a nonnegative penalty per
edge whose endpoints disagree (Potts form). Inference reduces to an s/t
min cut: node costs become terminal capacities after subtracting the
per-node minimum (so capacities stay nonnegative even for negative
costs), disagreement penalties become symmetric inter-node capacities.
A brute-force enumerator doubles as the testing oracle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


class SubmodularityError(NumericalError):
    """Negative disagreement penalty: min-cut optimality would not hold."""


_EPS = 1e-11
_BRUTE_FORCE_LIMIT = 24
_CHUNK_BITS = 18


@dataclass
class MrfProblem:
    """n nodes with (cost-of-0, cost-of-1) rows and weighted Potts edges."""

    n: int
    unary: np.ndarray    # (n, 2) float64, finite
    edges: np.ndarray    # (E, 2) int32
    weights: np.ndarray  # (E,) float64

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64).reshape(self.n, 2)
        self.edges = np.asarray(self.edges, dtype=np.int32).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.edges) != len(self.weights):
            raise ValueError("edges and weights must have equal length")
        if not np.isfinite(self.unary).all():
            raise ValueError("unary costs must be finite")
        if not np.isfinite(self.weights).all():
            raise ValueError("pairwise weights must be finite")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n):
            raise ValueError("edge endpoint out of range")


def energy(problem: MrfProblem, labeling: np.ndarray) -> float:
    """Total cost of a labeling: unary terms plus disagreement penalties."""
    x = np.asarray(labeling).astype(np.int64).reshape(-1)
    if x.shape != (problem.n,):
        raise ValueError(f"labeling length {x.size} != node count {problem.n}")
    total = float(problem.unary[np.arange(problem.n), x].sum())
    if len(problem.edges):
        disagree = x[problem.edges[:, 0]] != x[problem.edges[:, 1]]
        total += float(problem.weights[disagree].sum())
    return total


class _FlowNetwork:
    """Adjacency-list residual network for Dinic's algorithm."""

    def __init__(self, n_nodes: int):
        self.head: list[list[int]] = [[] for _ in range(n_nodes)]
        self.to: list[int] = []
        self.cap: list[float] = []

    def add_edge(self, u: int, v: int, cap_uv: float, cap_vu: float = 0.0):
        self.head[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(cap_uv)
        self.head[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(cap_vu)

    def _bfs_levels(self, source: int, sink: int):
        level = [-1] * len(self.head)
        level[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for eid in self.head[u]:
                v = self.to[eid]
                if level[v] < 0 and self.cap[eid] > _EPS:
                    level[v] = level[u] + 1
                    queue.append(v)
        return level if level[sink] >= 0 else None

    def _augment(self, source, sink, level, it):
        """Push flow along one source-sink path of the level graph."""
        path: list[int] = []
        u = source
        while True:
            if u == sink:
                flow = min(self.cap[eid] for eid in path)
                for eid in path:
                    self.cap[eid] -= flow
                    self.cap[eid ^ 1] += flow
                return flow
            advanced = False
            while it[u] < len(self.head[u]):
                eid = self.head[u][it[u]]
                v = self.to[eid]
                if self.cap[eid] > _EPS and level[v] == level[u] + 1:
                    path.append(eid)
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if not advanced:
                if u == source:
                    return 0.0
                level[u] = -1  # dead end for this phase
                last = path.pop()
                u = self.to[last ^ 1]
                it[u] += 1

    def max_flow(self, source: int, sink: int) -> float:
        total = 0.0
        while True:
            level = self._bfs_levels(source, sink)
            if level is None:
                return total
            it = [0] * len(self.head)
            while True:
                pushed = self._augment(source, sink, level, it)
                if pushed <= 0.0:
                    break
                total += pushed

    def source_side(self, source: int) -> np.ndarray:
        """Nodes reachable from source in the residual graph (minimal cut side)."""
        seen = np.zeros(len(self.head), dtype=bool)
        seen[source] = True
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for eid in self.head[u]:
                v = self.to[eid]
                if not seen[v] and self.cap[eid] > _EPS:
                    seen[v] = True
                    queue.append(v)
        return seen


def solve_max_flow(problem: MrfProblem):
    """Run the min-cut construction; return (labeling, flow_value).

    The flow value equals the optimal energy minus the sum of per-node
    minimum unary costs. Ties between minimum cuts resolve to the cut
    with the fewest source-side (label 1) nodes, so ties break toward 0.
    """
    if problem.weights.size and problem.weights.min() < 0:
        raise SubmodularityError("pairwise weights must be nonnegative")
    n = problem.n
    source, sink = n, n + 1
    net = _FlowNetwork(n + 2)
    base = problem.unary.min(axis=1)
    for i in range(n):
        cost0 = problem.unary[i, 0] - base[i]
        cost1 = problem.unary[i, 1] - base[i]
        if cost0 > 0.0:
            net.add_edge(source, i, cost0)
        if cost1 > 0.0:
            net.add_edge(i, sink, cost1)
    for (i, j), w in zip(problem.edges, problem.weights):
        if w > 0.0:
            net.add_edge(int(i), int(j), w, w)
    flow = net.max_flow(source, sink)
    labeling = net.source_side(source)[:n].astype(np.int8)
    return labeling, flow


def min_cut_infer(problem: MrfProblem) -> np.ndarray:
    """Exact global minimizer of the energy via max-flow/min-cut."""
    labeling, _ = solve_max_flow(problem)
    return labeling


def brute_force_infer(problem: MrfProblem) -> np.ndarray:
    """Exhaustive minimizer; lexicographically smallest labeling among ties.

    Vectorized over chunks of the 2^n label space; only usable for small n.
    """
    n = problem.n
    if n > _BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to n <= {_BRUTE_FORCE_LIMIT}")
    shifts = np.arange(n - 1, -1, -1, dtype=np.uint64)  # node 0 = most significant
    best_energy = np.inf
    best_labeling = None
    total = 1 << n
    chunk = 1 << _CHUNK_BITS
    e0 = problem.edges[:, 0] if len(problem.edges) else None
    for lo in range(0, total, chunk):
        ks = np.arange(lo, min(lo + chunk, total), dtype=np.uint64)
        labels = ((ks[:, None] >> shifts) & 1).astype(np.int8)
        energies = labels @ problem.unary[:, 1] + (1 - labels) @ problem.unary[:, 0]
        if e0 is not None:
            disagree = labels[:, problem.edges[:, 0]] != labels[:, problem.edges[:, 1]]
            energies += disagree @ problem.weights
        idx = int(np.argmin(energies))
        if energies[idx] < best_energy:  # strict: keeps the earliest (lex-smallest)
            best_energy = float(energies[idx])
            best_labeling = labels[idx].copy()
    return best_labeling


def dump_problem(problem: MrfProblem) -> str:
    """Round-trippable text form: n, n unary lines, then 'i j w' edge lines."""
    lines = [str(problem.n)]
    for c0, c1 in problem.unary:
        lines.append(f"{float(c0)!r} {float(c1)!r}")
    for (i, j), w in zip(problem.edges, problem.weights):
        lines.append(f"{i} {j} {float(w)!r}")
    return "\n".join(lines) + "\n"


def parse_problem(text: str) -> MrfProblem:
    """Inverse of dump_problem."""
    rows = [ln for ln in text.splitlines() if ln.strip()]
    n = int(rows[0])
    unary = np.array([[float(t) for t in rows[1 + i].split()] for i in range(n)])
    edges, weights = [], []
    for ln in rows[1 + n:]:
        i, j, w = ln.split()
        edges.append((int(i), int(j)))
        weights.append(float(w))
    return MrfProblem(
        n,
        unary.reshape(n, 2),
        np.array(edges, dtype=np.int32).reshape(-1, 2),
        np.array(weights),
    )
