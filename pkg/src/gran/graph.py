"""Graph containers, synthetic corpora, lower-triangular row views and I/O.

Graphs are simple and undirected with 0-based node indices.  Everything that
draws random numbers takes an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for structurally invalid graphs or row encodings."""


class EdgeListParseError(GraphError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph; edges are stored as sorted ``(u, v)`` with u < v."""

    num_nodes: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.num_nodes < 0:
            raise GraphError(f"negative node count {self.num_nodes}")
        normalized = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise GraphError(f"self-loop on node {u}")
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise GraphError(f"edge ({u}, {v}) out of range for {self.num_nodes} nodes")
            normalized.add((u, v) if u < v else (v, u))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_edges(cls, num_nodes: int, edges: Iterable[tuple[int, int]]) -> "Graph":
        return cls(num_nodes, frozenset(edges))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def adjacency(self) -> list[list[int]]:
        """Sorted neighbor lists."""
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        for nbrs in adj:
            nbrs.sort()
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        return a

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Graph whose node ``i`` is original node ``perm[i]``."""
        rank = {int(orig): i for i, orig in enumerate(perm)}
        return Graph(self.num_nodes, frozenset((rank[u], rank[v]) for u, v in self.edges))


@dataclass(frozen=True)
class Ordering:
    """Permutation mapping rank -> original node index."""

    perm: tuple

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise GraphError(f"not a permutation: {perm}")
        object.__setattr__(self, "perm", perm)

    def __len__(self):
        return len(self.perm)


@dataclass(frozen=True)
class OrderedRows:
    """Strict lower-triangular rows of A^pi, each padded to ``n_max`` columns."""

    ordering: Ordering
    rows: np.ndarray  # (num_nodes, n_max), uint8
    n_max: int

    @property
    def num_nodes(self) -> int:
        return self.rows.shape[0]

    def key(self) -> bytes:
        return self.rows.tobytes()


@dataclass
class GraphDataset:
    graphs: list
    name: str = "dataset"

    @property
    def n_max(self) -> int:
        return max((g.num_nodes for g in self.graphs), default=0)

    def __len__(self):
        return len(self.graphs)

    def subset(self, indices: Sequence[int], name: str | None = None) -> "GraphDataset":
        return GraphDataset([self.graphs[i] for i in indices], name or self.name)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple


# ---------------------------------------------------------------------------
# generators


def grid_graph(rows: int, cols: int) -> Graph:
    if rows < 1 or cols < 1:
        raise GraphError(f"grid needs positive sides, got {rows}x{cols}")
    edges = []
    for r in range(rows):
        for c in range(cols):
            node = r * cols + c
            if c + 1 < cols:
                edges.append((node, node + 1))
            if r + 1 < rows:
                edges.append((node, node + cols))
    return Graph.from_edges(rows * cols, edges)


def random_lobster(expected_backbone: int, p1: float, p2: float, rng: np.random.Generator) -> Graph:
    """Backbone path plus leaves (attached while coin flips succeed) and leaves of leaves.

    Backbone length is geometric with mean ``expected_backbone`` (always >= 1).
    Every first-level leaf gets further leaves while a ``p2`` coin succeeds.
    """
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
        raise ValueError("attachment probabilities must lie in [0, 1]")
    if p1 == 1.0 or p2 == 1.0:
        raise ValueError("attachment probability 1 would attach leaves forever")
    if expected_backbone < 1:
        raise ValueError("expected_backbone must be positive")
    backbone = int(rng.geometric(1.0 / expected_backbone))
    edges = [(i, i + 1) for i in range(backbone - 1)]
    nxt = backbone
    for b in range(backbone):
        while rng.random() < p1:
            leaf = nxt
            nxt += 1
            edges.append((b, leaf))
            while rng.random() < p2:
                edges.append((leaf, nxt))
                nxt += 1
    return Graph.from_edges(nxt, edges)


def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> Graph:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability {p} outside [0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return Graph.from_edges(n, zip(iu[keep].tolist(), ju[keep].tolist()))


def er_mle_fit(dataset: GraphDataset | Sequence[Graph]) -> float:
    graphs = dataset.graphs if isinstance(dataset, GraphDataset) else list(dataset)
    if not graphs:
        raise ValueError("cannot fit an edge density to an empty dataset")
    possible = sum(g.num_nodes * (g.num_nodes - 1) // 2 for g in graphs)
    if possible == 0:
        raise ValueError("every graph has fewer than 2 nodes; edge density undefined")
    return sum(g.num_edges for g in graphs) / possible


def grid_dataset(count: int, min_nodes: int, max_nodes: int, rng: np.random.Generator,
                 name: str = "grid") -> GraphDataset:
    """Grids whose sides are drawn uniformly from [ceil(sqrt(min)), floor(sqrt(max))]."""
    lo = math.isqrt(min_nodes - 1) + 1 if min_nodes > 1 else 1
    hi = math.isqrt(max_nodes)
    if lo > hi:
        raise ValueError(f"no square-ish grid fits the band [{min_nodes}, {max_nodes}]")
    graphs = []
    for _ in range(count):
        r, c = (int(x) for x in rng.integers(lo, hi + 1, size=2))
        graphs.append(grid_graph(r, c))
    return GraphDataset(graphs, name)


def lobster_dataset(count: int, min_nodes: int, max_nodes: int, rng: np.random.Generator,
                    expected_backbone: int = 80, p1: float = 0.7, p2: float = 0.7,
                    name: str = "lobster", max_tries: int = 1_000_000) -> GraphDataset:
    graphs = []
    tries = 0
    while len(graphs) < count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("lobster rejection sampling did not fill the size band")
        g = random_lobster(expected_backbone, p1, p2, rng)
        if min_nodes <= g.num_nodes <= max_nodes:
            graphs.append(g)
    return GraphDataset(graphs, name)


def er_dataset(count: int, min_nodes: int, max_nodes: int, p: float, rng: np.random.Generator,
               name: str = "er") -> GraphDataset:
    graphs = []
    for _ in range(count):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        graphs.append(erdos_renyi(n, p, rng))
    return GraphDataset(graphs, name)


# ---------------------------------------------------------------------------
# row views


def to_ordered_rows(graph: Graph, ordering: Ordering, n_max: int) -> OrderedRows:
    n = graph.num_nodes
    if n_max < n:
        raise GraphError(f"n_max={n_max} smaller than graph size {n}")
    if len(ordering) != n:
        raise GraphError(f"ordering has {len(ordering)} entries for a {n}-node graph")
    rank = np.empty(n, dtype=np.int64)
    rank[list(ordering.perm)] = np.arange(n)
    rows = np.zeros((n, n_max), dtype=np.uint8)
    if graph.edges:
        e = np.array(sorted(graph.edges), dtype=np.int64)
        ru, rv = rank[e[:, 0]], rank[e[:, 1]]
        rows[np.maximum(ru, rv), np.minimum(ru, rv)] = 1
    return OrderedRows(ordering, rows, n_max)


def from_ordered_rows(rows: OrderedRows | np.ndarray) -> Graph:
    mat = rows.rows if isinstance(rows, OrderedRows) else np.asarray(rows)
    n = mat.shape[0]
    upper = np.triu(mat[:, :n]) if n else mat[:, :0]
    if np.any(upper):
        i, j = np.argwhere(upper)[0]
        raise GraphError(f"row {i} has a nonzero entry at column {j} (on/above the diagonal)")
    if mat.shape[1] > n and np.any(mat[:, n:]):
        raise GraphError("nonzero entry in padding beyond the graph size")
    i, j = np.nonzero(np.tril(mat[:, :n], k=-1))
    return Graph.from_edges(n, zip(j.tolist(), i.tolist()))


# ---------------------------------------------------------------------------
# splits


def split_dataset(dataset: GraphDataset | int, seed: int) -> DatasetSplit:
    """80/20 train/test, then 20% of train held out for validation (floors)."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n < 5:
        raise ValueError(f"need at least 5 graphs to split, got {n}")
    idx = np.random.default_rng(seed).permutation(n).tolist()
    n_test = (n * 20) // 100
    n_prov = n - n_test
    n_val = (n_prov * 20) // 100
    n_train = n_prov - n_val
    return DatasetSplit(
        train=tuple(idx[:n_train]),
        validation=tuple(idx[n_train:n_prov]),
        test=tuple(idx[n_prov:]),
    )


# ---------------------------------------------------------------------------
# files


def write_edge_list(graph: Graph, path) -> None:
    lines = [f"{graph.num_nodes} {graph.num_edges}"]
    lines.extend(f"{u} {v}" for u, v in graph.sorted_edges())
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_edge_list(path) -> Graph:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EdgeListParseError(path, 1, "empty file")

    def ints(lineno, text, expected):
        parts = text.split()
        if len(parts) != expected:
            raise EdgeListParseError(path, lineno, f"expected {expected} integers, got {text!r}")
        try:
            return [int(p) for p in parts]
        except ValueError:
            raise EdgeListParseError(path, lineno, f"non-integer token in {text!r}") from None

    n, m = ints(1, lines[0], 2)
    if n < 0 or m < 0:
        raise EdgeListParseError(path, 1, "negative counts")
    if len(lines) - 1 != m:
        raise EdgeListParseError(path, len(lines), f"header announces {m} edges, found {len(lines) - 1}")
    edges = []
    seen = set()
    for k, text in enumerate(lines[1:], start=2):
        u, v = ints(k, text, 2)
        if u == v:
            raise EdgeListParseError(path, k, f"self-loop on node {u}")
        if not (0 <= u < n and 0 <= v < n):
            raise EdgeListParseError(path, k, f"endpoint out of range [0, {n})")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise EdgeListParseError(path, k, f"duplicate edge {key}")
        seen.add(key)
        edges.append(key)
    return Graph.from_edges(n, edges)


MANIFEST = "manifest.json"


def save_dataset(dataset: GraphDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(max(len(dataset) - 1, 0))))
    files = []
    for i, g in enumerate(dataset.graphs):
        fname = f"graph_{i:0{width}d}.txt"
        write_edge_list(g, directory / fname)
        files.append(fname)
    manifest = {"name": dataset.name, "n_max": dataset.n_max, "files": files}
    with open(directory / MANIFEST, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_dataset(directory) -> GraphDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    manifest_path = directory / MANIFEST
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        files = manifest["files"]
        name = manifest.get("name", directory.name)
    else:
        files = sorted(f for f in os.listdir(directory) if f.endswith(".txt"))
        name = directory.name
    graphs = [read_edge_list(directory / f) for f in files]
    return GraphDataset(graphs, name)


def validate_graph(graph: Graph) -> None:
    """Re-check the Graph invariants; raises GraphError on violation."""
    seen = set()
    for u, v in graph.edges:
        if not (0 <= u < v < graph.num_nodes):
            raise GraphError(f"bad edge ({u}, {v})")
        if (u, v) in seen:
            raise GraphError(f"duplicate edge ({u}, {v})")
        seen.add((u, v))
