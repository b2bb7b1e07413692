"""Graph statistics, TV-kernel MMD, 4-node orbit counts and the lobster classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .graph import Graph, GraphDataset

log = logging.getLogger(__name__)

ORBITS = tuple(range(4, 15))
MMD_CLAMP = 1e-12


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        if len(self.mass) != len(self.bin_edges) - 1:
            raise MetricError(f"{len(self.mass)} masses for {len(self.bin_edges)} bin edges")


def _normalize(counts: np.ndarray) -> np.ndarray:
    counts = counts.astype(np.float64)
    total = counts.sum()
    return counts / total if total > 0 else counts


def degree_histogram(graph: Graph, max_degree_bins: int) -> Histogram:
    """Normalized degree counts over integer bins ``[0, max_degree_bins)``."""
    deg = graph.degrees()
    if deg.size and deg.max() >= max_degree_bins:
        raise MetricError(f"degree {deg.max()} outside {max_degree_bins} bins")
    counts = np.bincount(deg, minlength=max_degree_bins)
    return Histogram(np.arange(max_degree_bins + 1, dtype=np.float64), _normalize(counts))


def clustering_coefficients(graph: Graph) -> np.ndarray:
    adj = [set(a) for a in graph.adjacency()]
    out = np.zeros(graph.num_nodes)
    for v, nb in enumerate(adj):
        d = len(nb)
        if d < 2:
            continue
        tri = sum(len(adj[u] & nb) for u in nb) // 2
        out[v] = 2.0 * tri / (d * (d - 1))
    return out


def clustering_histogram(graph: Graph, bins: int = 100) -> Histogram:
    counts, edges = np.histogram(clustering_coefficients(graph), bins=bins, range=(0.0, 1.0))
    return Histogram(edges, _normalize(counts))


def normalized_laplacian(graph: Graph) -> np.ndarray:
    """``D^-1/2 (D - A) D^-1/2`` with ``D^-1/2 = 0`` on isolated nodes."""
    a = graph.adjacency_matrix().astype(np.float64)
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    return inv[:, None] * (np.diag(deg) - a) * inv[None, :]


def laplacian_eigenvalues(graph: Graph, graph_id=None) -> np.ndarray:
    if graph.num_nodes < 1:
        raise MetricError(f"graph {graph_id}: spectrum needs at least one node")
    try:
        return np.linalg.eigvalsh(normalized_laplacian(graph))
    except np.linalg.LinAlgError as exc:
        raise MetricError(f"graph {graph_id}: eigensolver failed: {exc}") from exc


def laplacian_spectrum_histogram(graph: Graph, bins: int = 200, graph_id=None) -> Histogram:
    ev = np.clip(laplacian_eigenvalues(graph, graph_id), 0.0, 2.0)
    counts, edges = np.histogram(ev, bins=bins, range=(0.0, 2.0))
    return Histogram(edges, _normalize(counts))


# orbit id by (edge count, sorted induced degrees) then by node degree
_ORBIT_TABLE = {
    (3, (1, 1, 2, 2)): {1: 4, 2: 5},        # path
    (3, (1, 1, 1, 3)): {1: 6, 3: 7},        # star
    (4, (2, 2, 2, 2)): {2: 8},              # cycle
    (4, (1, 2, 2, 3)): {1: 9, 2: 10, 3: 11},  # triangle with pendant
    (5, (2, 2, 3, 3)): {2: 12, 3: 13},      # diamond
    (6, (3, 3, 3, 3)): {3: 14},             # clique
}


def _connected_quads(adj: list[set]) -> Iterable[tuple]:
    """Each connected 4-node vertex set exactly once (ESU enumeration)."""
    def extend(sub, nbhd, ext, root):
        if len(sub) == 4:
            yield sub
            return
        ext = sorted(ext)
        while ext:
            w = ext.pop()
            new_ext = set(ext)
            for u in adj[w]:
                if u > root and u not in nbhd:
                    new_ext.add(u)
            yield from extend(sub + (w,), nbhd | adj[w], new_ext, root)

    for v in range(len(adj)):
        yield from extend((v,), adj[v] | {v}, {u for u in adj[v] if u > v}, v)


def orbit_counts_4(graph: Graph) -> np.ndarray:
    """Per-node counts of orbits 4..14, shape ``(n, 11)``."""
    adj = [set(a) for a in graph.adjacency()]
    counts = np.zeros((graph.num_nodes, len(ORBITS)), dtype=np.int64)
    for quad in _connected_quads(adj):
        qs = set(quad)
        deg = {v: len(adj[v] & qs) for v in quad}
        m = sum(deg.values()) // 2
        table = _ORBIT_TABLE[(m, tuple(sorted(deg.values())))]
        for v in quad:
            counts[v, table[deg[v]] - 4] += 1
    return counts


def orbit_feature(graph: Graph) -> np.ndarray:
    """Mean per-node orbit-count vector; zeros for an empty graph."""
    c = orbit_counts_4(graph)
    return c.mean(axis=0) if graph.num_nodes else np.zeros(len(ORBITS))


def tv_distance(p: Histogram, q: Histogram) -> float:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise MetricError("histograms have different binning")
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def _clamp(value: float) -> float:
    if -MMD_CLAMP < value < 0.0:
        return 0.0
    if value < 0.0:
        log.warning("mmd estimate %.3e is negative beyond the clamp", value)
    return value


def _mmd_from_kernels(kaa, kbb, kab) -> float:
    return _clamp(float(kaa.mean() + kbb.mean() - 2.0 * kab.mean()))


def mmd_tv(set_a: Sequence[Histogram], set_b: Sequence[Histogram], sigma: float = 1.0) -> float:
    """Biased squared MMD with kernel ``exp(-tv^2 / (2 sigma^2))``."""
    if not set_a or not set_b:
        raise MetricError("mmd needs two nonempty sets")
    edges = set_a[0].bin_edges
    for h in list(set_a) + list(set_b):
        if h.bin_edges.shape != edges.shape or not np.array_equal(h.bin_edges, edges):
            raise MetricError("histograms have different binning")
    a = np.stack([h.mass for h in set_a])
    b = np.stack([h.mass for h in set_b])

    def gram(x, y):
        tv = 0.5 * np.abs(x[:, None, :] - y[None, :, :]).sum(axis=-1)
        return np.exp(-tv * tv / (2.0 * sigma * sigma))

    return _mmd_from_kernels(gram(a, a), gram(b, b), gram(a, b))


def mmd_rbf_vectors(set_a, set_b, sigma: float = 1.0) -> float:
    """Biased squared MMD with a Gaussian kernel on Euclidean distance."""
    a = np.atleast_2d(np.asarray(set_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(set_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise MetricError("mmd needs two nonempty sets")
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"vector dimensions differ: {a.shape[1]} vs {b.shape[1]}")

    def gram(x, y):
        d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-d2 / (2.0 * sigma * sigma))

    return _mmd_from_kernels(gram(a, a), gram(b, b), gram(a, b))


def is_lobster(graph: Graph) -> bool:
    """A tree whose remainder after stripping leaves twice is a path (or empty)."""
    n = graph.num_nodes
    if n == 0 or graph.num_edges != n - 1:
        return False
    adj = [set(a) for a in graph.adjacency()]
    seen = {0}
    stack = [0]
    while stack:
        for u in adj[stack.pop()]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    if len(seen) != n:
        return False
    alive = set(range(n))
    for _ in range(2):
        leaves = {v for v in alive if len(adj[v] & alive) <= 1}
        alive -= leaves
    return all(len(adj[v] & alive) <= 2 for v in alive)


def lobster_accuracy(graphs: Sequence[Graph]) -> float:
    if not graphs:
        raise MetricError("lobster accuracy of an empty set")
    return sum(is_lobster(g) for g in graphs) / len(graphs)


@dataclass
class EvalConfig:
    sigma: float = 1.0
    clustering_bins: int = 100
    spectral_bins: int = 200
    lobster: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise MetricError(f"sigma must be positive, got {self.sigma}")
        if self.clustering_bins < 1 or self.spectral_bins < 1:
            raise MetricError("bin counts must be positive")


@dataclass
class MetricReport:
    degree_mmd: float
    clustering_mmd: float
    orbit_mmd: float
    spectral_mmd: float
    lobster_accuracy: float | None = None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={'none' if v is None else repr(float(v))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        vals = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            vals[key.strip()] = None if raw.strip() == "none" else float(raw)
        return cls(**vals)


def _graphs(ds) -> list:
    return list(ds.graphs) if isinstance(ds, GraphDataset) else list(ds)


def evaluate(generated, reference, config: EvalConfig | None = None) -> MetricReport:
    config = config or EvalConfig()
    gen, ref = _graphs(generated), _graphs(reference)
    if not gen or not ref:
        raise MetricError("evaluate needs nonempty generated and reference sets")
    max_deg = max(int(g.degrees().max(initial=0)) for g in gen + ref)
    bins = max_deg + 1

    def stats(graphs, tag):
        deg = [degree_histogram(g, bins) for g in graphs]
        clus = [clustering_histogram(g, config.clustering_bins) for g in graphs]
        spec = [laplacian_spectrum_histogram(g, config.spectral_bins, graph_id=f"{tag}[{i}]")
                for i, g in enumerate(graphs)]
        orb = np.stack([orbit_feature(g) for g in graphs])
        return deg, clus, spec, orb

    gd, gc, gs, go = stats(gen, "generated")
    rd, rc, rs, ro = stats(ref, "reference")
    s = config.sigma
    return MetricReport(
        degree_mmd=mmd_tv(gd, rd, s),
        clustering_mmd=mmd_tv(gc, rc, s),
        orbit_mmd=mmd_rbf_vectors(go, ro, s),
        spectral_mmd=mmd_tv(gs, rs, s),
        lobster_accuracy=lobster_accuracy(gen) if config.lobster else None,
    )
