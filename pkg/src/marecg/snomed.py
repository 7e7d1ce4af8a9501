"""SNOMED-CT code routing, leaf targets and graph-smoothed soft targets."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .ontology import ConceptGraph, build_graph

# Worked routing examples (leaf indices first, parent root last).
REFERENCE_ROUTES: dict[int, tuple[int, ...]] = {
    164889003: (5, 1),  # atrial fibrillation
    164909002: (13, 2),  # left bundle branch block
    426177001: (11, 1),  # sinus bradycardia
    54329005: (25, 19, 3),  # anterior wall acute MI
    164931005: (21, 25, 3),  # ST elevation, anterior leads
    233917008: (17, 18, 2),  # 2nd degree AV block (Mobitz II)
    698252002: (1,),  # cardiac dysrhythmia NOS
    6374002: (2,),  # bundle branch block NOS
    413444003: (3,),  # myocardial ischaemia NOS
}

EXTENSION_FILE = "routing_extension.txt"


class RoutingError(ValueError):
    pass


@dataclass(frozen=True)
class RoutingTable:
    entries: Mapping[int, frozenset[int]]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, code: int) -> bool:
        return int(code) in self.entries

    def route(self, code: int) -> frozenset[int]:
        return self.entries.get(int(code), frozenset())

    def merged(self, other: "RoutingTable") -> "RoutingTable":
        clash = set(self.entries) & set(other.entries)
        clash = {c for c in clash if self.entries[c] != other.entries[c]}
        if clash:
            raise RoutingError(f"conflicting routes for codes {sorted(clash)}")
        return RoutingTable({**self.entries, **other.entries})

    def validate(self, graph: ConceptGraph) -> "RoutingTable":
        roots = set(graph.roots)
        for code, nodes in self.entries.items():
            bad = [c for c in nodes if not 0 <= c < graph.n_nodes]
            if bad:
                raise RoutingError(f"code {code}: unknown node index {bad[0]}")
            if len(nodes & roots) > 1:
                raise RoutingError(f"code {code}: routes to more than one root")
        return self


def dumps_routing(table: RoutingTable) -> str:
    lines = []
    for code in sorted(table.entries):
        lines.append(f"R {code} " + ",".join(str(c) for c in sorted(table.entries[code])))
    return "\n".join(lines) + "\n"


def loads_routing(text: str) -> RoutingTable:
    entries: dict[int, frozenset[int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "R":
            raise RoutingError(f"line {lineno}: expected 'R <code> <idx>,...', got {raw!r}")
        try:
            code = int(parts[1])
            nodes = frozenset(int(tok) for tok in parts[2].split(","))
        except ValueError as exc:
            raise RoutingError(f"line {lineno}: non-integer field in {raw!r}") from exc
        if code in entries:
            raise RoutingError(f"line {lineno}: duplicate code {code}")
        entries[code] = nodes
    return RoutingTable(entries)


def load_routing(path) -> RoutingTable:
    return loads_routing(Path(path).read_text(encoding="utf-8"))


def reference_routing() -> RoutingTable:
    return RoutingTable({code: frozenset(nodes) for code, nodes in REFERENCE_ROUTES.items()})


def default_routing(graph: ConceptGraph | None = None) -> RoutingTable:
    """Worked examples merged with the shipped extension file."""
    text = resources.files("marecg.data").joinpath(EXTENSION_FILE).read_text(encoding="utf-8")
    table = reference_routing().merged(loads_routing(text))
    return table.validate(graph or build_graph())


# -- leaf targets ----------------------------------------------------------------


@dataclass(frozen=True)
class LeafTarget:
    """Multi-hot leaf indicator plus the primary positive node index."""

    y: np.ndarray  # uint8, one entry per leaf in graph enumeration order
    active: tuple[int, ...]  # active leaf node indices, ascending
    primary: int | None
    routed: frozenset[int]

    @property
    def root_only(self) -> bool:
        return not self.active and bool(self.routed)

    @property
    def has_primary(self) -> bool:
        return self.primary is not None


def route_code(code: int, table: RoutingTable | None = None) -> frozenset[int]:
    table = table if table is not None else default_routing()
    return table.route(code)


def isa_depth(graph: ConceptGraph) -> np.ndarray:
    """Shortest-path distance from each node to the nearest root."""
    return graph.distance[:, graph.roots].min(axis=1)


def select_primary(active: Iterable[int], graph: ConceptGraph, rule: str = "max_index") -> int | None:
    active = sorted(set(active))
    if not active:
        return None
    if rule == "max_index":
        return active[-1]
    if rule == "isa_depth":
        depth = isa_depth(graph)
        return max(active, key=lambda c: (depth[c], c))
    raise ValueError(f"unknown primary rule {rule!r}")


def resolve_codes(
    codes: Iterable[int],
    table: RoutingTable | None = None,
    graph: ConceptGraph | None = None,
    rule: str = "max_index",
) -> LeafTarget:
    graph = graph or build_graph()
    table = table if table is not None else default_routing(graph)
    routed: set[int] = set()
    for code in codes:
        routed |= table.route(code)
    leaves = graph.leaves
    active = tuple(sorted(routed & set(leaves)))
    y = np.zeros(len(leaves), dtype=np.uint8)
    pos = graph.leaf_position()
    for c in active:
        y[pos[c]] = 1
    return LeafTarget(y, active, select_primary(active, graph, rule), frozenset(routed))


# -- soft targets ----------------------------------------------------------------


def unnormalized_mass(target: LeafTarget, D: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    if target.primary is None:
        raise ValueError("record has no primary positive (root-only or unmapped); filter it out of GSCL")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    u = np.exp(-np.asarray(D[target.primary], dtype=np.float64) / sigma)
    active = list(target.active)
    u[active] = np.maximum(1.0, u[active])
    return u


def soft_target(target: LeafTarget, D: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Clamped graph-distance soft target over all nodes (sums to one)."""
    u = unnormalized_mass(target, D, sigma)
    return u / u.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def soft_target_limit_check(target: LeafTarget, D: np.ndarray, sigma: float, tol: float = 1e-3) -> str:
    """Classify the soft target as 'uniform_active', 'uniform_all' or 'graded'."""
    t = soft_target(target, D, sigma)
    n = t.size
    on_active = np.zeros(n)
    on_active[list(target.active)] = 1.0 / len(target.active)
    if total_variation(t, on_active) <= tol:
        return "uniform_active"
    if total_variation(t, np.full(n, 1.0 / n)) <= tol:
        return "uniform_all"
    return "graded"
