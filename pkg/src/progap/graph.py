"""Graph storage, file ingestion, synthetic SBM generation, degree bounding and splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .rng import make_rng


class GraphFormatError(ValueError):
    """Raised when an input file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed, unweighted graph with node features and labels.

    Edges are kept in compressed sparse column form over targets: the
    in-neighbors of node ``i`` are ``indices[indptr[i]:indptr[i + 1]]``,
    sorted ascending.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    _adj_t: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = self.num_nodes
        if self.indptr.shape != (n + 1,):
            raise ValueError("indptr must have num_nodes + 1 entries")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValueError("edge endpoint out of range [0, num_nodes)")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(
                f"feature matrix has {self.features.shape[0]} rows, expected {n}"
            )
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.shape[0]}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        for arr in (self.indptr, self.indices, self.features, self.labels):
            arr.setflags(write=False)

    @classmethod
    def from_edges(cls, src, dst, features, labels, num_classes: int | None = None) -> Graph:
        """Build a graph from parallel source/target arrays, dropping duplicates."""
        features = np.array(features, dtype=np.float64)
        labels = np.array(labels, dtype=np.int64)
        n = features.shape[0]
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise ValueError("src and dst must have the same length")
        if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
            raise ValueError(f"edge endpoint out of range [0, {n})")
        # column-major order: sort by (target, source), then drop repeats
        keys = np.unique(dst * n + src)
        dst, src = np.divmod(keys, n) if n else (keys, keys)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        return cls(n, indptr, src.astype(np.int64), features, labels, int(num_classes))

    @property
    def num_edges(self) -> int:
        return int(self.indices.size)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(src, dst)`` arrays in column-major order."""
        dst = np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))
        return self.indices.copy(), dst

    def edge_set(self) -> set[tuple[int, int]]:
        src, dst = self.edges()
        return set(zip(src.tolist(), dst.tolist()))

    def in_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.num_nodes)

    def adjacency_t(self) -> sp.csr_matrix:
        """``A^T`` as CSR: row ``i`` selects the in-neighbors of ``i``."""
        if self._adj_t is None:
            data = np.ones(self.num_edges, dtype=np.float64)
            mat = sp.csr_matrix(
                (data, self.indices, self.indptr), shape=(self.num_nodes, self.num_nodes)
            )
            object.__setattr__(self, "_adj_t", mat)
        return self._adj_t

    def with_edges(self, src, dst) -> Graph:
        return Graph.from_edges(src, dst, self.features, self.labels, self.num_classes)


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if not (self.train.shape == self.val.shape == self.test.shape):
            raise ValueError("masks must share one shape")
        overlap = (self.train & self.val) | (self.train & self.test) | (self.val & self.test)
        if overlap.any():
            raise ValueError("split masks overlap")
        if not self.train.any():
            raise ValueError("train mask is empty")

    def sizes(self) -> tuple[int, int, int]:
        return int(self.train.sum()), int(self.val.sum()), int(self.test.sum())

    def get(self, split: str) -> np.ndarray:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)


@dataclass(frozen=True)
class SbmSpec:
    num_nodes: int
    num_classes: int
    intra_p: float
    inter_p: float
    feature_dim: int = 16
    feature_signal: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes <= 0 or self.num_classes <= 0:
            raise ValueError("SBM needs at least one node and one class")
        for name in ("intra_p", "inter_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.feature_signal < 0:
            raise ValueError("feature_signal must be non-negative")


def _parse_int_pair(line: str, lineno: int, path) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 2:
        raise GraphFormatError(f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise GraphFormatError(f"{path}:{lineno}: non-integer node index in {line!r}") from None


def load_graph(edge_path, feature_path, label_path) -> Graph:
    """Read a graph from an edge list, a feature CSV and a label file."""
    rows = []
    with open(feature_path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise GraphFormatError(f"{feature_path}:{lineno}: non-numeric feature") from None
    if rows and len({len(r) for r in rows}) != 1:
        raise GraphFormatError(f"{feature_path}: rows have differing widths")
    features = np.array(rows, dtype=np.float64).reshape(len(rows), -1)

    labels = []
    with open(label_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise GraphFormatError(f"{label_path}:{lineno}: non-integer label {line!r}") from None

    src, dst = [], []
    with open(edge_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            s, d = _parse_int_pair(line, lineno, edge_path)
            src.append(s)
            dst.append(d)
    return Graph.from_edges(src, dst, features, np.array(labels, dtype=np.int64))


def save_graph(graph: Graph, edge_path, feature_path, label_path) -> None:
    """Write ``graph`` in the formats read by :func:`load_graph`."""
    src, dst = graph.edges()
    Path(edge_path).write_text(
        "".join(f"{s}\t{d}\n" for s, d in zip(src.tolist(), dst.tolist())), encoding="utf-8"
    )
    with open(feature_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in graph.features:
            writer.writerow([repr(float(v)) for v in row])
    Path(label_path).write_text(
        "".join(f"{y}\n" for y in graph.labels.tolist()), encoding="utf-8"
    )


def _sample_block(rng, rows: np.ndarray, cols: np.ndarray, p: float, diagonal: bool):
    """Bernoulli(p) edges between ``rows`` and ``cols``, excluding self-loops."""
    nr, nc = rows.size, cols.size
    total = nr * (nc - 1) if diagonal else nr * nc
    if total <= 0 or p <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    m = rng.binomial(total, p)
    flat = rng.choice(total, size=m, replace=False)
    if diagonal:
        r, c = np.divmod(flat, nc - 1)
        c = c + (c >= r)  # skip the diagonal slot
    else:
        r, c = np.divmod(flat, nc)
    return rows[r], cols[c]


def generate_sbm(spec: SbmSpec) -> tuple[Graph, SplitMasks]:
    """Directed stochastic block model with Gaussian class-mean features."""
    rng = make_rng(spec.seed, "sbm")
    n, c = spec.num_nodes, spec.num_classes
    labels = rng.permutation(np.arange(n) % c)
    members = [np.flatnonzero(labels == k) for k in range(c)]

    src, dst = [], []
    for a in range(c):
        for b in range(c):
            p = spec.intra_p if a == b else spec.inter_p
            s, d = _sample_block(rng, members[a], members[b], p, diagonal=a == b)
            src.append(s)
            dst.append(d)

    means = rng.standard_normal((c, spec.feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = spec.feature_signal * means[labels] + rng.standard_normal((n, spec.feature_dim))

    graph = Graph.from_edges(np.concatenate(src), np.concatenate(dst), features, labels, c)
    masks = split_nodes(graph, seed=spec.seed)
    return graph, masks


def bound_degree(graph: Graph, cap: int, seed: int = 0) -> Graph:
    """Keep a uniformly random subset of at most ``cap`` out-edges per node."""
    if cap < 1:
        raise ValueError("degree cap must be at least 1")
    src, dst = graph.edges()
    if src.size == 0:
        return graph
    rng = make_rng(seed, "bound_degree")
    # random shuffle, then a stable sort by source keeps a uniform
    # random order of each node's out-edges
    perm = rng.permutation(src.size)
    perm = perm[np.argsort(src[perm], kind="stable")]
    s_sorted = src[perm]
    starts = np.searchsorted(s_sorted, s_sorted, side="left")
    rank = np.arange(s_sorted.size) - starts
    keep = perm[rank < cap]
    return graph.with_edges(src[keep], dst[keep])


def drop_node(graph: Graph, node: int) -> Graph:
    """Remove ``node`` with all its incident edges; remaining ids shift down by one."""
    src, dst = graph.edges()
    keep = (src != node) & (dst != node)
    src, dst = src[keep], dst[keep]
    src = src - (src > node)
    dst = dst - (dst > node)
    mask = np.arange(graph.num_nodes) != node
    return Graph.from_edges(
        src, dst, graph.features[mask], graph.labels[mask], graph.num_classes
    )


def split_nodes(graph_or_n, ratios=(0.75, 0.10, 0.15), seed: int = 0) -> SplitMasks:
    """Random train/val/test split.

    Sizes use largest-remainder rounding of ``N * ratio`` (ties favor the
    earlier split), so each size is within one of its exact share.
    """
    n = graph_or_n.num_nodes if isinstance(graph_or_n, Graph) else int(graph_or_n)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    exact = np.round(n * ratios, 9)
    sizes = np.floor(exact).astype(np.int64)
    frac = exact - sizes
    for i in np.argsort(-frac, kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1

    perm = make_rng(seed, "split").permutation(n)
    masks = []
    start = 0
    for size in sizes:
        m = np.zeros(n, dtype=bool)
        m[perm[start:start + size]] = True
        masks.append(m)
        start += size
    return SplitMasks(*masks)
