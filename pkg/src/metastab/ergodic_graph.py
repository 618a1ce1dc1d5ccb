"""Accessibility digraph over the monotonicity intervals of the map.

There is an arrow ``I_i -> I_j`` when some iterate ``T^k(I_i)`` covers
``I_j``. The support of an ergodic absolutely continuous invariant
measure that charges ``I_i`` contains every interval reachable from it,
so the closed classes of the digraph (strongly connected components with
no outgoing arrow) bound the number of such measures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .map_core import MapModel

TOL = 1e-10


@dataclass(frozen=True)
class IntervalUnion:
    """Sorted, pairwise disjoint closed intervals; touching ones are merged."""

    intervals: tuple = ()

    @classmethod
    def of(cls, pieces) -> "IntervalUnion":
        ps = sorted((float(a), float(b)) for a, b in pieces if b >= a)
        out: list[list[float]] = []
        for a, b in ps:
            if out and a <= out[-1][1] + TOL:
                out[-1][1] = max(out[-1][1], b)
            else:
                out.append([a, b])
        return cls(tuple((a, b) for a, b in out))

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)

    @property
    def measure(self) -> float:
        return float(sum(b - a for a, b in self.intervals))

    def contains(self, lo: float, hi: float, tol: float = TOL) -> bool:
        return any(a <= lo + tol and hi - tol <= b for a, b in self.intervals)

    def issubset(self, other: "IntervalUnion", tol: float = TOL) -> bool:
        return all(other.contains(a, b, tol) for a, b in self.intervals)


def image_union(model: MapModel, u: IntervalUnion, steps: int = 1) -> IntervalUnion:
    """Forward image of an interval union, branch by branch."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    cur = u
    for _ in range(int(steps)):
        pieces = []
        for a, b in cur:
            for br in model.branches:
                lo, hi = max(a, br.lo), min(b, br.hi)
                if lo > hi:
                    continue
                ya, yb = float(br.eval(lo)), float(br.eval(hi))
                pieces.append((min(ya, yb), max(ya, yb)))
        cur = IntervalUnion.of(pieces)
    return cur


@dataclass(frozen=True)
class AccessGraph:
    """Arrows between the six partition intervals with their smallest witness ``k``."""

    nodes: tuple
    intervals: tuple
    witness: dict = field(repr=False)
    k_max: int = 64

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        for (i, j), k in self.witness.items():
            g.add_edge(i, j, k=k)
        return g

    def reachable(self, node: str) -> set:
        return {node} | nx.descendants(self.digraph(), node)

    def to_dot(self) -> str:
        lines = ["digraph access {"]
        for n in self.nodes:
            lines.append(f'  "{n}";')
        for (i, j), k in sorted(self.witness.items()):
            lines.append(f'  "{i}" -> "{j}" [label="{k}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_access_graph(model: MapModel, k_max: int = 64) -> AccessGraph:
    """Arrows ``i -> j`` with the smallest ``k <= k_max`` such that ``T^k(I_i)`` covers ``I_j``."""
    names = tuple(f"I{i + 1}" for i in range(len(model.branches)))
    ivs = tuple((br.lo, br.hi) for br in model.branches)
    witness = {}
    for i, (a, b) in enumerate(ivs):
        cur = IntervalUnion.of([(a, b)])
        for k in range(1, int(k_max) + 1):
            cur = image_union(model, cur, 1)
            for j, (c, d) in enumerate(ivs):
                if (names[i], names[j]) not in witness and cur.contains(c, d):
                    witness[(names[i], names[j])] = k
            if all((names[i], n) in witness for n in names):
                break
    return AccessGraph(names, ivs, witness, int(k_max))


@dataclass(frozen=True)
class ClassReport:
    count: int
    classes: tuple

    def text(self) -> str:
        lines = [f"closed classes: {self.count}"]
        for c in self.classes:
            lines.append("  {" + ", ".join(c) + "}")
        return "\n".join(lines) + "\n"


def ergodic_component_bound(g: AccessGraph) -> ClassReport:
    """Closed communicating classes, i.e. the sink components of the condensation."""
    dg = g.digraph()
    cond = nx.condensation(dg)
    classes = []
    for c in cond.nodes:
        if cond.out_degree(c) == 0:
            classes.append(tuple(sorted(cond.nodes[c]["members"])))
    classes.sort()
    return ClassReport(len(classes), tuple(classes))


def iterated_measures(model: MapModel, u: IntervalUnion, steps: int) -> np.ndarray:
    """Lebesgue measure of ``T^k(u)`` for ``k = 0..steps``."""
    out = [u.measure]
    cur = u
    for _ in range(int(steps)):
        cur = image_union(model, cur, 1)
        out.append(cur.measure)
    return np.array(out)
