"""Exact k-nearest-neighbor graphs (brute force and kd-tree) and graph-overlap metrics.

Both search paths compute squared distances with :func:`sq_dists`, which
accumulates one coordinate at a time in a fixed order. Elementwise float
operations are correctly rounded, so the two paths produce bit-identical
distances, and ties are broken by the lower node id.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

LEAF_SIZE = 32


@dataclass(frozen=True)
class DirectedGraph:
    """``neighbors[v]`` lists N(v) in (distance, id) order; edge (w -> v) iff w in N(v)."""

    neighbors: np.ndarray  # (N, k) int64

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.neighbors.shape[0]

    def edges(self) -> set[tuple[int, int]]:
        """Set of (w, v) pairs."""
        v = np.repeat(np.arange(self.n_nodes), self.k)
        return set(zip(self.neighbors.ravel().tolist(), v.tolist()))

    def __eq__(self, other):
        return isinstance(other, DirectedGraph) and np.array_equal(self.neighbors, other.neighbors)

    def __hash__(self):
        return hash(self.neighbors.tobytes())


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, broadcasting over leading axes; last axis is the coordinate."""
    d = a.shape[-1]
    acc = (a[..., 0] - b[..., 0]) ** 2
    for j in range(1, d):
        acc = acc + (a[..., j] - b[..., j]) ** 2
    return acc


def _check(features: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("features must be an N x d matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) <= k:
        raise ValueError(f"need more than k={k} nodes, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return x


def knn_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Brute-force k-NN on a batch: ``x`` is (..., N, d), result (..., N, k).

    Used on the training hot path; identical ordering rules to :func:`knn_brute`.
    """
    d2 = sq_dists(x[..., :, None, :], x[..., None, :, :])
    n = x.shape[-2]
    diag = np.arange(n)
    d2[..., diag, diag] = np.inf
    # stable sort keeps lower ids first among equal distances
    order = np.argsort(d2, axis=-1, kind="stable")
    return order[..., :k]


def knn_brute(features: np.ndarray, k: int) -> DirectedGraph:
    x = _check(features, k)
    return DirectedGraph(knn_indices(x, k).astype(np.int64))


class KDTree:
    """Static kd-tree: split on the widest-spread dimension at the median, leaves of <= ``leaf_size``."""

    def __init__(self, data: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        self.leaf_size = leaf_size
        # flat node arrays: children (-1 for leaf), index range into self.idx, bounding boxes
        self.idx = np.arange(len(self.data))
        self.left: list[int] = []
        self.right: list[int] = []
        self.start: list[int] = []
        self.stop: list[int] = []
        lo, hi = [], []
        self._lo, self._hi = lo, hi
        self._build(0, len(self.data))
        self.lo = np.asarray(lo)
        self.hi = np.asarray(hi)
        self.leaves = [i for i, c in enumerate(self.left) if c < 0]

    def _build(self, start: int, stop: int) -> int:
        node = len(self.left)
        pts = self.data[self.idx[start:stop]]
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(start)
        self.stop.append(stop)
        self._lo.append(pts.min(axis=0))
        self._hi.append(pts.max(axis=0))
        if stop - start <= self.leaf_size:
            return node
        spread = self._hi[node] - self._lo[node]
        dim = int(np.argmax(spread))
        if spread[dim] == 0:
            return node  # all points coincide; keep as an oversized leaf
        sub = self.idx[start:stop]
        order = np.lexsort((sub, pts[:, dim]))
        self.idx[start:stop] = sub[order]
        mid = start + (stop - start) // 2
        self.left[node] = self._build(start, mid)
        self.right[node] = self._build(mid, stop)
        return node

    def _box_sq_dist(self, nodes: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Lower bounds (M, len(nodes)) on the squared distance from each query to each box.

        Each per-axis gap is <= the true coordinate gap of any point in the box and
        rounding is monotone, so a bound never exceeds a true ``sq_dists`` value.
        """
        qq = q[:, None, :]
        gap = np.maximum(np.maximum(self.lo[nodes][None] - qq, qq - self.hi[nodes][None]), 0.0)
        return sq_dists(gap, np.zeros_like(gap))

    def query_self(self, k: int) -> np.ndarray:
        """k nearest other points for every indexed point, (N, k)."""
        n = len(self.data)
        if k > n - 1:
            raise ValueError(f"k={k} needs at least {k + 1} points, got {n}")
        out = np.empty((n, k), dtype=np.int64)
        self._left = np.asarray(self.left)
        self._right = np.asarray(self.right)
        self._leaf_arr = np.asarray(self.leaves)
        self._sizes = np.asarray(self.stop) - np.asarray(self.start)
        for leaf in self.leaves:
            qids = self.idx[self.start[leaf]:self.stop[leaf]]
            out[qids] = self._query_group(qids, k)
        return out

    def _points(self, nodes) -> np.ndarray:
        return np.concatenate([self.idx[self.start[i]:self.stop[i]] for i in nodes])

    def _select(self, qids: np.ndarray, cand: np.ndarray, k: int):
        """Exact k smallest (distance, id) pairs among ``cand`` for each query, self excluded."""
        cand = np.sort(cand)  # a stable sort on distance then breaks ties by lower id
        d2 = sq_dists(self.data[qids][:, None, :], self.data[cand][None, :, :])
        d2[qids[:, None] == cand[None, :]] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        return np.take_along_axis(d2, order, axis=1), cand[order]

    def _query_group(self, qids: np.ndarray, k: int) -> np.ndarray:
        q = self.data[qids]
        # 1. an upper bound on each query's k-th distance from the leaves nearest the group centre
        leaves = self._leaf_arr
        near = leaves[np.argsort(self._box_sq_dist(leaves, q.mean(axis=0)[None])[0], kind="stable")]
        n_take = int(np.searchsorted(np.cumsum(self._sizes[near]), k + 1)) + 1
        tau = self._select(qids, self._points(near[:n_take]), k)[0][:, -1]
        # 2. breadth-first descent keeping every box some query might reach within its bound
        frontier = np.array([0])
        hits = []
        while len(frontier):
            keep = frontier[np.any(self._box_sq_dist(frontier, q) <= tau[:, None], axis=0)]
            is_leaf = self._left[keep] < 0
            hits.append(keep[is_leaf])
            inner = keep[~is_leaf]
            frontier = np.concatenate([self._left[inner], self._right[inner]])
        # 3. exact selection over the surviving candidates (a superset of every true neighbor)
        return self._select(qids, self._points(np.concatenate(hits)), k)[1]


def knn_kdtree(features: np.ndarray, k: int, leaf_size: int = LEAF_SIZE) -> DirectedGraph:
    x = _check(features, k)
    return DirectedGraph(KDTree(x, leaf_size).query_self(k))


def shared_edge_percentage(a: DirectedGraph, b: DirectedGraph) -> float:
    """Percentage of the N*k directed edges of ``a`` that also appear in ``b``."""
    if a.n_nodes != b.n_nodes or a.k != b.k:
        raise ValueError(f"graphs differ in shape: N={a.n_nodes},k={a.k} vs N={b.n_nodes},k={b.k}")
    return 100.0 * len(a.edges() & b.edges()) / (a.n_nodes * a.k)


def shared_edge_percentage_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-cloud shared-edge percentage for batched neighbor arrays of shape (B, N, k)."""
    hits = (a[..., :, :, None] == b[..., :, None, :]).any(axis=-1)
    return 100.0 * hits.sum(axis=(-1, -2)) / (a.shape[-2] * a.shape[-1])


def write_graph_csv(graph: DirectedGraph, path: str | os.PathLike) -> None:
    """One ``v,w`` line per edge (w in N(v)), sorted by (v, rank)."""
    with open(path, "w") as fh:
        for v, row in enumerate(graph.neighbors.tolist()):
            for w in row:
                fh.write(f"{v},{w}\n")


def read_graph_csv(path: str | os.PathLike) -> DirectedGraph:
    rows: dict[int, list[int]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                v, w = (int(p) for p in line.split(","))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: expected 'v,w', got {line!r}") from None
            rows.setdefault(v, []).append(w)
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise ValueError(f"{path}: node ids must be 0..N-1")
    ks = {len(r) for r in rows.values()}
    if len(ks) != 1:
        raise ValueError(f"{path}: every node needs the same number of neighbors")
    return DirectedGraph(np.asarray([rows[v] for v in range(n)], dtype=np.int64))
