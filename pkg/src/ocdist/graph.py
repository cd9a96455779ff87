"""
Communication topology.

Weighted directed graphs over ``n`` agents, the balanced / strongly
connected checks, the signed incidence map ``B`` (one row per ordered
edge), the Laplacian ``B^T B`` and doubly stochastic mixing matrices.

Agents are indexed ``0..n-1`` in code; the text file format uses
``1..n``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    """Raised when a graph violates a precondition of an operation."""


@dataclass(frozen=True)
class DirectedGraph:
    """Weighted digraph. ``weights[(i, j)]`` is ``a_ij > 0`` for edge ``i -> j``."""

    n: int
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise GraphError(f"a graph needs at least 2 agents, got n={self.n}")
        for (i, j), w in self.weights.items():
            if i == j:
                raise GraphError(f"self-loop at agent {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={self.n}")
            if not w > 0:
                raise GraphError(f"edge ({i}, {j}) has non-positive weight {w}")

    @classmethod
    def from_edges(cls, n, edges):
        """Build from ``(i, j)`` or ``(i, j, w)`` tuples; repeated edges add up."""
        weights = {}
        for edge in edges:
            i, j = int(edge[0]), int(edge[1])
            w = edge[2] if len(edge) > 2 else 1
            weights[(i, j)] = weights.get((i, j), 0) + w
        return cls(n, weights)

    @property
    def edges(self):
        """Ordered edges in lexicographic order; this fixes the row order of ``B``."""
        return sorted(self.weights)

    def out_neighbors(self, i):
        return [j for (a, j) in self.edges if a == i]

    def neighbors(self, i):
        """Agents sharing an edge with ``i`` in either direction."""
        return sorted({j for (a, j) in self.weights if a == i} | {a for (a, j) in self.weights if j == i})

    def adjacency(self):
        A = np.zeros((self.n, self.n))
        for (i, j), w in self.weights.items():
            A[i, j] = float(w)
        return A

    def is_adjacent(self, i, j):
        return (i, j) in self.weights or (j, i) in self.weights

    def diameter(self):
        """Hop diameter of the undirected version (``inf`` if disconnected)."""
        best = 0
        for s in range(self.n):
            dist = _bfs(self.n, lambda u: self.neighbors(u), s)
            if len(dist) < self.n:
                return float("inf")
            best = max(best, max(dist.values()))
        return best


@dataclass(frozen=True)
class Diagnostics:
    balanced: bool
    strongly_connected: bool
    witness: str = ""

    @property
    def ok(self):
        return self.balanced and self.strongly_connected


def _bfs(n, succ, source):
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in succ(u):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def validate(g: DirectedGraph) -> Diagnostics:
    """Check that ``g`` is balanced and strongly connected.

    Rational weights (ints, ``Fraction``) are compared exactly; floats to
    ``1e-12``. Failures carry a witness naming the offending node or pair.
    """
    witness = []
    balanced = True
    for i in range(g.n):
        out_w = sum((w for (a, _), w in g.weights.items() if a == i), 0)
        in_w = sum((w for (_, b), w in g.weights.items() if b == i), 0)
        if isinstance(out_w, (int, Fraction)) and isinstance(in_w, (int, Fraction)):
            equal = out_w == in_w
        else:
            equal = abs(float(out_w) - float(in_w)) <= 1e-12
        if not equal:
            balanced = False
            witness.append(f"node {i} out-weight {out_w} != in-weight {in_w}")
            break

    succ = {i: g.out_neighbors(i) for i in range(g.n)}
    strongly_connected = True
    for s in range(g.n):
        reached = _bfs(g.n, succ.__getitem__, s)
        if len(reached) < g.n:
            t = min(set(range(g.n)) - set(reached))
            strongly_connected = False
            witness.append(f"node {t} unreachable from node {s}")
            break
    return Diagnostics(balanced, strongly_connected, "; ".join(witness))


@dataclass(frozen=True)
class IncidenceMap:
    """Signed edge-node matrix: row ``(i, j)`` has ``+1`` at ``i`` and ``-1`` at ``j``."""

    n: int
    edges: tuple
    matrix: np.ndarray

    @property
    def n_edges(self):
        return len(self.edges)

    def expand(self, p):
        """``B kron I_p``, acting on agent-major stacked states of dimension ``n p``."""
        return np.kron(self.matrix, np.eye(p))

    def edge_errors(self, x):
        """Stacked ``e_ij = x_i - x_j`` for states ``x`` of shape ``(n, p)``."""
        x = np.asarray(x, dtype=float)
        return np.stack([x[i] - x[j] for i, j in self.edges])


def incidence(g: DirectedGraph) -> IncidenceMap:
    edges = tuple(g.edges)
    B = np.zeros((len(edges), g.n))
    for row, (i, j) in enumerate(edges):
        B[row, i] = 1.0
        B[row, j] = -1.0
    B.setflags(write=False)
    return IncidenceMap(g.n, edges, B)


def laplacian(g: DirectedGraph, require_connected=False) -> np.ndarray:
    """Laplacian of the symmetrized unit-weight multigraph, equal to ``B^T B``.

    A pair linked in both directions contributes weight 2.
    """
    if require_connected:
        diag = validate(g)
        if not diag.strongly_connected:
            raise GraphError(f"graph is not strongly connected: {diag.witness}")
    counts = np.zeros((g.n, g.n))
    for i, j in g.edges:
        counts[i, j] += 1.0
    S = counts + counts.T
    return np.diag(S.sum(axis=1)) - S


def mixing_matrix(g: DirectedGraph) -> np.ndarray:
    """Symmetric doubly stochastic weights for consensus and the DGD baseline.

    Metropolis rule on the symmetrized weights ``s_ij = (a_ij + a_ji) / 2``:
    ``W_ij = s_ij / (1 + max(d_i, d_j))`` with ``d_i`` the weighted degree.
    """
    diag = validate(g)
    if not diag.ok:
        raise GraphError(f"mixing matrix needs a balanced, strongly connected graph: {diag.witness}")
    A = g.adjacency()
    S = (A + A.T) / 2.0
    deg = S.sum(axis=1)
    W = np.zeros_like(S)
    for i in range(g.n):
        for j in range(g.n):
            if i != j and S[i, j] > 0:
                W[i, j] = S[i, j] / (1.0 + max(deg[i], deg[j]))
        W[i, i] = 1.0 - W[i].sum()
    return W


def second_singular_value(W):
    """``sigma_2(W) = ||W - (1/n) 1 1^T||_2``."""
    n = W.shape[0]
    return float(np.linalg.norm(W - np.full((n, n), 1.0 / n), 2))


def random_balanced_graph(n, rng, n_cycles=None, max_len=None):
    """Random balanced, strongly connected digraph built from unit-weight directed cycles.

    The first cycle is Hamiltonian, which gives strong connectivity; further
    cycles over random subsets keep every node's in- and out-weight equal.
    """
    if n < 2:
        raise GraphError("need n >= 2")
    if n_cycles is None:
        n_cycles = int(rng.integers(1, 4))
    edges = []

    def add_cycle(nodes):
        for a, b in zip(nodes, nodes[1:] + nodes[:1]):
            edges.append((int(a), int(b), 1))

    add_cycle(list(rng.permutation(n)))
    for _ in range(n_cycles - 1):
        hi = n if max_len is None else min(n, max_len)
        length = int(rng.integers(2, hi + 1))
        add_cycle(list(rng.choice(n, size=length, replace=False)))
    return DirectedGraph.from_edges(n, edges)


def parse_graph(text):
    """Parse ``n <count>`` / ``edge <i> <j> <weight>`` lines (1-based agents)."""
    n = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "n" and len(parts) == 2:
                n = int(parts[1])
            elif parts[0] == "edge" and len(parts) in (3, 4):
                w = _parse_weight(parts[3]) if len(parts) == 4 else 1
                edges.append((int(parts[1]) - 1, int(parts[2]) - 1, w))
            else:
                raise ValueError(line)
        except ValueError as exc:
            raise GraphError(f"line {lineno}: cannot parse {raw!r}") from exc
    if n is None:
        raise GraphError("missing 'n <count>' line")
    return DirectedGraph.from_edges(n, edges)


def _parse_weight(token):
    try:
        return int(token)
    except ValueError:
        pass
    if "/" in token:
        return Fraction(token)
    return float(token)


def read_graph(path):
    return parse_graph(Path(path).read_text())


def format_graph(g: DirectedGraph):
    lines = [f"n {g.n}"]
    lines += [f"edge {i + 1} {j + 1} {g.weights[(i, j)]}" for i, j in g.edges]
    return "\n".join(lines) + "\n"
