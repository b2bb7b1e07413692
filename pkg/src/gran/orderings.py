"""Canonical node orderings and k-core decomposition.

All tie-breaks are (degree descending, node index ascending), which makes every
ordering a deterministic function of the graph alone.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

from .graph import Graph, OrderedRows, Ordering, to_ordered_rows


class OrderingKind(str, enum.Enum):
    DEFAULT = "default"
    DEGREE_DESCENT = "deg"
    BFS = "bfs"
    DFS = "dfs"
    KCORE = "kcore"

    @classmethod
    def parse(cls, name: "str | OrderingKind") -> "OrderingKind":
        if isinstance(name, cls):
            return name
        aliases = {"degree_descent": cls.DEGREE_DESCENT, "degree": cls.DEGREE_DESCENT, "core": cls.KCORE}
        try:
            return cls(name)
        except ValueError:
            if name in aliases:
                return aliases[name]
            raise ValueError(
                f"unknown ordering {name!r}; expected one of {[k.value for k in cls]}"
            ) from None


ALL_KINDS = tuple(OrderingKind)


@dataclass(frozen=True)
class OrderingFamily:
    graph: Graph
    members: tuple  # ((OrderingKind, Ordering, OrderedRows), ...)

    def __len__(self):
        return len(self.members)

    @property
    def kinds(self) -> list:
        return [k for k, _, _ in self.members]

    @property
    def orderings(self) -> list:
        return [o for _, o, _ in self.members]

    @property
    def rows(self) -> list:
        return [r for _, _, r in self.members]


def _rank_key(deg):
    return lambda v: (-deg[v], v)


def default_order(graph: Graph) -> Ordering:
    return Ordering(tuple(range(graph.num_nodes)))


def degree_descent_order(graph: Graph) -> Ordering:
    deg = graph.degrees()
    return Ordering(tuple(sorted(range(graph.num_nodes), key=_rank_key(deg))))


def _sorted_adjacency(graph: Graph):
    deg = graph.degrees()
    key = _rank_key(deg)
    return deg, [sorted(nbrs, key=key) for nbrs in graph.adjacency()]


def bfs_order(graph: Graph) -> Ordering:
    deg, adj = _sorted_adjacency(graph)
    seen = [False] * graph.num_nodes
    order = []
    for root in sorted(range(graph.num_nodes), key=_rank_key(deg)):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            v = queue.popleft()
            order.append(v)
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    queue.append(w)
    return Ordering(tuple(order))


def dfs_order(graph: Graph) -> Ordering:
    """Preorder of a recursive DFS, done with an explicit iterator stack."""
    deg, adj = _sorted_adjacency(graph)
    seen = [False] * graph.num_nodes
    order = []
    for root in sorted(range(graph.num_nodes), key=_rank_key(deg)):
        if seen[root]:
            continue
        seen[root] = True
        order.append(root)
        stack = [iter(adj[root])]
        while stack:
            for w in stack[-1]:
                if not seen[w]:
                    seen[w] = True
                    order.append(w)
                    stack.append(iter(adj[w]))
                    break
            else:
                stack.pop()
    return Ordering(tuple(order))


def core_numbers(graph: Graph) -> list[int]:
    """Bucket-based min-degree peeling, O(|V| + |E|)."""
    n = graph.num_nodes
    if n == 0:
        return []
    adj = graph.adjacency()
    deg = [len(a) for a in adj]
    max_deg = max(deg)
    # bin[d] = start of degree-d block inside vert
    counts = [0] * (max_deg + 1)
    for d in deg:
        counts[d] += 1
    bin_start = [0] * (max_deg + 1)
    start = 0
    for d in range(max_deg + 1):
        bin_start[d] = start
        start += counts[d]
    pos = [0] * n
    vert = [0] * n
    fill = list(bin_start)
    for v in range(n):
        pos[v] = fill[deg[v]]
        vert[pos[v]] = v
        fill[deg[v]] += 1
    for i in range(n):
        v = vert[i]
        for u in adj[v]:
            if deg[u] > deg[v]:
                du = deg[u]
                pu = pos[u]
                pw = bin_start[du]
                w = vert[pw]
                if u != w:
                    vert[pu], vert[pw] = w, u
                    pos[u], pos[w] = pw, pu
                bin_start[du] += 1
                deg[u] -= 1
    return deg


def kcore_order(graph: Graph) -> Ordering:
    core = core_numbers(graph)
    deg = graph.degrees()
    return Ordering(tuple(sorted(range(graph.num_nodes), key=lambda v: (-core[v], -deg[v], v))))


_BUILDERS = {
    OrderingKind.DEFAULT: default_order,
    OrderingKind.DEGREE_DESCENT: degree_descent_order,
    OrderingKind.BFS: bfs_order,
    OrderingKind.DFS: dfs_order,
    OrderingKind.KCORE: kcore_order,
}


def compute_ordering(graph: Graph, kind) -> Ordering:
    return _BUILDERS[OrderingKind.parse(kind)](graph)


def build_family(graph: Graph, kinds: Sequence, n_max: int | None = None) -> OrderingFamily:
    """Orderings for ``kinds`` with duplicate adjacency matrices dropped (first wins)."""
    kinds = [OrderingKind.parse(k) for k in kinds]
    if not kinds:
        raise ValueError("ordering family needs at least one kind")
    n_max = graph.num_nodes if n_max is None else n_max
    members = []
    seen = set()
    for kind in kinds:
        ordering = compute_ordering(graph, kind)
        rows = to_ordered_rows(graph, ordering, n_max)
        key = rows.key()
        if key in seen:
            continue
        seen.add(key)
        members.append((kind, ordering, rows))
    return OrderingFamily(graph, tuple(members))


def parse_kinds(names: Iterable) -> list[OrderingKind]:
    return [OrderingKind.parse(n) for n in names]
