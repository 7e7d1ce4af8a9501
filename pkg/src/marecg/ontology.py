"""Curated 40-node cardiac concept graph and its distance geometry.

The node enumeration is frozen: the primary-positive rule selects the
highest-indexed active leaf, so renumbering changes supervision targets.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ROOT, LEAF = "root", "leaf"
EDGE_KINDS = ("is_a", "sub_hierarchy", "sibling", "ring")

# (index, name, abbreviation, parent root or -1)
_NODES = [
    (0, "Normal", "Normal", -1),
    (1, "Rhythm", "Rhythm", -1),
    (2, "Conduction", "Conduction", -1),
    (3, "Ischemic", "Ischemic", -1),
    (4, "Structural", "Structural", -1),
    (5, "Atrial fibrillation", "AF", 1),
    (6, "Atrial flutter", "AFL", 1),
    (7, "Supraventricular tachycardia", "SVT", 1),
    (8, "Ventricular tachycardia", "VT", 1),
    (9, "Premature atrial contraction", "PAC", 1),
    (10, "Premature ventricular contraction", "PVC", 1),
    (11, "Sinus bradycardia", "SBrad", 1),
    (12, "Sinus tachycardia", "STach", 1),
    (13, "Left bundle branch block", "LBBB", 2),
    (14, "Right bundle branch block", "RBBB", 2),
    (15, "Left anterior fascicular block", "LAFB", 2),
    (16, "First-degree AV block", "1AVB", 2),
    (17, "Second-degree AV block", "2AVB", 2),
    (18, "Complete AV block", "3AVB", 2),
    (19, "Acute myocardial infarction", "AMI", 3),
    (20, "Old myocardial infarction", "OMI", 3),
    (21, "ST elevation", "STE", 3),
    (22, "ST depression", "STD", 3),
    (23, "T-wave inversion", "TWI", 3),
    (24, "Myocardial ischaemia", "MyIsch", 3),
    (25, "Anterior MI", "AntMI", 3),
    (26, "Inferior MI", "InfMI", 3),
    (27, "Left ventricular hypertrophy", "LVH", 4),
    (28, "Right ventricular hypertrophy", "RVH", 4),
    (29, "Left atrial enlargement", "LAE", 4),
    (30, "Right atrial enlargement", "RAE", 4),
    (31, "Low voltage", "LowV", 4),
    (32, "Prolonged QT interval", "LongQT", 2),
    (33, "Nonspecific ST-T changes", "NSSTC", 3),
    (34, "Normal sinus rhythm", "NSR", 0),
    (35, "Early repolarisation", "EarlyR", 0),
    (36, "Sinus arrhythmia", "SinusA", 0),
    (37, "Paced rhythm", "Paced", 1),
    (38, "Wolff-Parkinson-White syndrome", "WPW", 2),
    (39, "Incomplete RBBB", "IRBBB", 2),
]

_SUB_HIERARCHY = [(25, 19), (25, 20), (26, 19), (26, 20), (21, 24), (22, 24), (23, 24)]
# the AV-block chain contributes two edges (1AVB-2AVB, 2AVB-3AVB)
_SIBLING = [
    (13, 14), (16, 17), (17, 18), (19, 24), (25, 26),
    (21, 22), (27, 29), (28, 30), (5, 6), (8, 10),
]
_RING = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    index: int
    name: str
    abbr: str
    parent: int

    @property
    def tier(self) -> str:
        return ROOT if self.parent < 0 else LEAF


@dataclass(frozen=True)
class Edge:
    kind: str
    i: int
    j: int

    def key(self):
        a, b = sorted((self.i, self.j))
        return (a, b, EDGE_KINDS.index(self.kind))


@dataclass
class ConceptGraph:
    nodes: list[Node]
    edges: list[Edge]
    adjacency: np.ndarray = field(repr=False)
    norm_adjacency: np.ndarray = field(repr=False)
    distance: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def roots(self) -> list[int]:
        return [n.index for n in self.nodes if n.tier == ROOT]

    @property
    def leaves(self) -> list[int]:
        return [n.index for n in self.nodes if n.tier == LEAF]

    def abbr(self, index: int) -> str:
        return self.nodes[index].abbr

    def index_of(self, abbr: str) -> int:
        for n in self.nodes:
            if n.abbr == abbr:
                return n.index
        raise KeyError(abbr)

    def edges_of_kind(self, kind: str) -> list[Edge]:
        return [e for e in self.edges if e.kind == kind]

    def leaf_position(self) -> dict[int, int]:
        """Map node index -> position in the 35-length leaf indicator."""
        return {c: k for k, c in enumerate(self.leaves)}


def _validate(nodes: list[Node], edges: list[Edge]) -> None:
    seen = set()
    for k, n in enumerate(nodes):
        if n.index in seen:
            raise GraphFormatError(f"duplicate node index {n.index} ({n.abbr})")
        seen.add(n.index)
        if n.index != k:
            raise GraphFormatError(f"node {n.abbr}: index {n.index} out of order (expected {k})")
    by_index = {n.index: n for n in nodes}
    for n in nodes:
        if n.tier == LEAF:
            parent = by_index.get(n.parent)
            if parent is None or parent.tier != ROOT:
                raise GraphFormatError(f"leaf {n.index} ({n.abbr}) has non-root parent {n.parent}")
    pairs = set()
    for e in edges:
        if e.kind not in EDGE_KINDS:
            raise GraphFormatError(f"unknown edge kind {e.kind!r}")
        if e.i == e.j or e.i not in by_index or e.j not in by_index:
            raise GraphFormatError(f"invalid edge {e.kind} {e.i} {e.j}")
        pair = tuple(sorted((e.i, e.j)))
        if pair in pairs:
            raise GraphFormatError(f"duplicate edge {e.i}-{e.j}")
        pairs.add(pair)
    for n in nodes:
        if n.tier != LEAF:
            continue
        isa = [e for e in edges if e.kind == "is_a" and n.index in (e.i, e.j)]
        if len(isa) != 1 or n.parent not in (isa[0].i, isa[0].j):
            raise GraphFormatError(f"leaf {n.index} ({n.abbr}) needs exactly one is_a edge to its parent")


def _assemble(nodes: list[Node], edges: list[Edge]) -> ConceptGraph:
    _validate(nodes, edges)
    edges = sorted(edges, key=Edge.key)
    n = len(nodes)
    A = np.zeros((n, n), dtype=np.int64)
    for e in edges:
        A[e.i, e.j] = A[e.j, e.i] = 1
    return ConceptGraph(nodes, edges, A, normalize_adjacency(A), tree_distance(A))


def build_graph() -> ConceptGraph:
    """Build the canonical compiled-in concept graph."""
    nodes = [Node(i, name, abbr, parent) for i, name, abbr, parent in _NODES]
    edges = [Edge("is_a", n.index, n.parent) for n in nodes if n.parent >= 0]
    edges += [Edge("sub_hierarchy", i, j) for i, j in _SUB_HIERARCHY]
    edges += [Edge("sibling", i, j) for i, j in _SIBLING]
    edges += [Edge("ring", i, j) for i, j in _RING]
    return _assemble(nodes, edges)


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """Symmetric normalisation with self-loops, D^-1/2 (A + I) D^-1/2."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T) or np.any(np.diag(A) != 0):
        raise ValueError("adjacency must be symmetric with a zero diagonal")
    A_tilde = A + np.eye(A.shape[0])
    inv_sqrt = 1.0 / np.sqrt(A_tilde.sum(axis=1))
    return inv_sqrt[:, None] * A_tilde * inv_sqrt[None, :]


def tree_distance(A: np.ndarray) -> np.ndarray:
    """All-pairs unweighted shortest paths by BFS from every source.

    Unreachable pairs are clamped to (max finite distance) + 1.
    """
    A = np.asarray(A)
    n = A.shape[0]
    neighbours = [np.flatnonzero(A[i]).tolist() for i in range(n)]
    D = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        D[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in neighbours[u]:
                if D[src, v] < 0:
                    D[src, v] = D[src, u] + 1
                    queue.append(v)
    unreachable = D < 0
    if unreachable.any():
        D[unreachable] = D.max() + 1
    return D


def floyd_warshall(A: np.ndarray) -> np.ndarray:
    """Independent all-pairs shortest path reference (same clamp rule)."""
    A = np.asarray(A)
    n = A.shape[0]
    D = np.where(A > 0, 1.0, np.inf)
    np.fill_diagonal(D, 0.0)
    for k in range(n):
        D = np.minimum(D, D[:, k : k + 1] + D[k : k + 1, :])
    finite = np.isfinite(D)
    out = np.zeros((n, n), dtype=np.int64)
    out[finite] = D[finite].astype(np.int64)
    if not finite.all():
        out[~finite] = out[finite].max() + 1
    return out


def distance_profile(graph: ConceptGraph, c: int, max_distance: int | None = None) -> np.ndarray:
    """Histogram of tree distances from node ``c`` (index k counts nodes at D=k)."""
    if not 0 <= c < graph.n_nodes:
        raise IndexError(f"node index {c} out of range")
    size = (max_distance if max_distance is not None else int(graph.distance.max())) + 1
    return np.bincount(graph.distance[c], minlength=size)


# -- line-oriented text format -------------------------------------------------


def dumps_graph(graph: ConceptGraph) -> str:
    lines = [f"# concept graph: {graph.n_nodes} nodes, {graph.n_edges} undirected edges"]
    for n in graph.nodes:
        lines.append(f"N {n.index} {n.tier} {n.parent} {n.abbr} {n.name}")
    for e in sorted(graph.edges, key=Edge.key):
        a, b = sorted((e.i, e.j))
        lines.append(f"E {e.kind} {a} {b}")
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> ConceptGraph:
    nodes, edges = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=5)
        try:
            if parts[0] == "N":
                _, idx, tier, parent, abbr, name = parts
                node = Node(int(idx), name, abbr, int(parent))
                if node.tier != tier:
                    raise GraphFormatError(f"line {lineno}: tier {tier!r} inconsistent with parent {parent}")
                nodes.append(node)
            elif parts[0] == "E":
                _, kind, i, j = parts
                edges.append(Edge(kind, int(i), int(j)))
            else:
                raise GraphFormatError(f"line {lineno}: unknown record type {parts[0]!r}")
        except ValueError as exc:
            if isinstance(exc, GraphFormatError):
                raise
            raise GraphFormatError(f"line {lineno}: malformed entry {line!r}") from exc
    return _assemble(nodes, edges)


def save_graph(graph: ConceptGraph, path) -> None:
    Path(path).write_text(dumps_graph(graph), encoding="utf-8", newline="\n")


def load_graph(path) -> ConceptGraph:
    return loads_graph(Path(path).read_text(encoding="utf-8"))


def distance_csv(D: np.ndarray) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in D)
