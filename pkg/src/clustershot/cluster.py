"""Density clustering of a precomputed distance matrix (HDBSCAN).

Pipeline: mutual-reachability transform -> exact minimum spanning tree ->
single-linkage dendrogram -> condensed tree at ``min_cluster_size`` ->
excess-of-mass cluster extraction. Points outside every selected cluster are
noise. Dense O(B^2) computation throughout; batch sizes here are at most a
few hundred, so exact beats approximate.

Determinism: MST edges are processed in (weight, i, j) lexicographic order,
so ties cannot reorder the dendrogram between runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

NOISE = -1

# Merge distances are clamped below before inverting to a density level, so
# exact-duplicate points stay finite in the stability arithmetic.
_MIN_MERGE_DIST = 1e-12


class DistanceMatrixError(ValueError):
    """The supplied matrix is not a valid symmetric dissimilarity."""


@dataclass(frozen=True)
class ClusterConfig:
    min_cluster_size: int = 4
    min_samples: int | None = None  # None -> min_cluster_size
    allow_single_cluster: bool = True

    def validate(self) -> None:
        if self.min_cluster_size < 2:
            raise ValueError(f"min_cluster_size must be >= 2, got {self.min_cluster_size}")
        if self.min_samples is not None and self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")

    @property
    def resolved_min_samples(self) -> int:
        return self.min_samples if self.min_samples is not None else self.min_cluster_size


@dataclass
class ClusterAssignment:
    """Per-row cluster labels in {1..P} plus NOISE for unassigned rows."""

    labels: np.ndarray
    n_clusters: int

    def members(self, cluster: int) -> np.ndarray:
        if not 1 <= cluster <= self.n_clusters:
            raise ValueError(f"cluster id {cluster} outside 1..{self.n_clusters}")
        return np.flatnonzero(self.labels == cluster)

    @property
    def sizes(self) -> list[int]:
        return [int((self.labels == p).sum()) for p in range(1, self.n_clusters + 1)]

    @property
    def noise_fraction(self) -> float:
        return float((self.labels == NOISE).mean()) if len(self.labels) else 0.0


@dataclass
class CondensedTree:
    """Diagnostic view of the condensed hierarchy."""

    rows: list[tuple[int, int, float, int]]  # (parent, child, density_level, child_size)
    stability: dict[int, float]
    selected: set[int]
    n_points: int

    def summary_lines(self) -> list[str]:
        lines = [f"condensed tree: {len(self.rows)} rows, {len(self.stability)} clusters"]
        for cluster in sorted(self.stability):
            mark = "*" if cluster in self.selected else " "
            lines.append(
                f"  {mark} cluster {cluster}: stability={self.stability[cluster]:.6g}"
            )
        return lines


def _check_distance_matrix(dist: np.ndarray) -> np.ndarray:
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DistanceMatrixError(f"expected a square matrix, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise DistanceMatrixError("distance matrix contains non-finite values")
    if not np.allclose(d, d.T, atol=1e-8):
        raise DistanceMatrixError("distance matrix is not symmetric")
    if np.abs(np.diag(d)).max(initial=0.0) > 1e-12:
        raise DistanceMatrixError("distance matrix diagonal is not zero")
    return d


def mutual_reachability(dist: np.ndarray, min_samples: int) -> np.ndarray:
    """max(core_i, core_j, d_ij) with core_i = distance to the
    ``min_samples``-th nearest neighbour of i, self excluded."""
    d = _check_distance_matrix(dist)
    b = d.shape[0]
    if min_samples >= b:
        raise ValueError(f"min_samples={min_samples} needs at least {min_samples + 1} points, got {b}")
    off_diag = d.copy()
    np.fill_diagonal(off_diag, np.inf)
    core = np.sort(off_diag, axis=1)[:, min_samples - 1]
    mr = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    return mr


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(b)] = self.find(a)


def minimum_spanning_tree(dist: np.ndarray) -> list[tuple[int, int, float]]:
    """Kruskal MST edges in ascending (weight, i, j) order."""
    b = dist.shape[0]
    iu, ju = np.triu_indices(b, k=1)
    w = dist[iu, ju]
    order = np.lexsort((ju, iu, w))
    uf = _UnionFind(b)
    edges: list[tuple[int, int, float]] = []
    for idx in order:
        a, c = int(iu[idx]), int(ju[idx])
        if uf.find(a) != uf.find(c):
            uf.union(a, c)
            edges.append((a, c, float(w[idx])))
            if len(edges) == b - 1:
                break
    return edges


def single_linkage(edges: list[tuple[int, int, float]], n_points: int) -> np.ndarray:
    """Dendrogram rows [left, right, distance, size]; node n_points+i is row i."""
    uf = _UnionFind(2 * n_points - 1)
    size = np.ones(2 * n_points - 1, dtype=np.int64)
    rows = np.empty((n_points - 1, 4), dtype=np.float64)
    nxt = n_points
    for i, (a, b, w) in enumerate(edges):
        ra, rb = uf.find(a), uf.find(b)
        size[nxt] = size[ra] + size[rb]
        rows[i] = (ra, rb, w, size[nxt])
        uf.parent[ra] = nxt
        uf.parent[rb] = nxt
        nxt += 1
    return rows


def _subtree_points(node: int, linkage: np.ndarray, n_points: int) -> list[int]:
    out: list[int] = []
    stack = [node]
    while stack:
        cur = stack.pop()
        if cur < n_points:
            out.append(cur)
        else:
            row = linkage[cur - n_points]
            stack.extend((int(row[0]), int(row[1])))
    return out


def _condense(linkage: np.ndarray, n_points: int, min_cluster_size: int) -> list[tuple[int, int, float, int]]:
    """Condensed tree rows (parent, child, level, child_size).

    Cluster ids start at n_points (the root); levels are 1/merge-distance.
    A split survives only if both sides reach ``min_cluster_size``; smaller
    sides fall out of the parent cluster point by point at the split level.
    """

    def node_size(node: int) -> int:
        return 1 if node < n_points else int(linkage[node - n_points, 3])

    root = 2 * n_points - 2
    relabel = {root: n_points}
    next_label = n_points + 1
    rows: list[tuple[int, int, float, int]] = []
    queue = [root]
    while queue:
        node = queue.pop(0)
        cluster = relabel[node]
        left, right, dist = int(linkage[node - n_points, 0]), int(linkage[node - n_points, 1]), linkage[node - n_points, 2]
        level = 1.0 / max(dist, _MIN_MERGE_DIST)
        lsz, rsz = node_size(left), node_size(right)
        if lsz >= min_cluster_size and rsz >= min_cluster_size:
            for child, csz in ((left, lsz), (right, rsz)):
                relabel[child] = next_label
                rows.append((cluster, next_label, level, csz))
                next_label += 1
                queue.append(child)
        elif lsz < min_cluster_size and rsz < min_cluster_size:
            for child in (left, right):
                for point in _subtree_points(child, linkage, n_points):
                    rows.append((cluster, point, level, 1))
        else:
            keep, drop = (left, right) if lsz >= min_cluster_size else (right, left)
            relabel[keep] = cluster
            queue.append(keep)
            for point in _subtree_points(drop, linkage, n_points):
                rows.append((cluster, point, level, 1))
    return rows


def _stability(rows: list[tuple[int, int, float, int]], n_points: int) -> tuple[dict[int, float], dict[int, float]]:
    birth = {n_points: 0.0}
    for _, child, level, _ in rows:
        if child >= n_points:
            birth[child] = level
    stability = {c: 0.0 for c in birth}
    for parent, _, level, size in rows:
        stability[parent] += size * (level - birth[parent])
    return stability, birth


def _select_excess_of_mass(
    rows: list[tuple[int, int, float, int]],
    stability: dict[int, float],
    n_points: int,
    allow_single_cluster: bool,
) -> set[int]:
    children: dict[int, list[int]] = {c: [] for c in stability}
    for parent, child, _, _ in rows:
        if child >= n_points:
            children[parent].append(child)

    root = n_points
    subtree_stability = dict(stability)
    provisional: dict[int, bool] = {}
    for cluster in sorted(stability, reverse=True):  # children precede parents
        if cluster == root and not allow_single_cluster:
            provisional[cluster] = False
            subtree_stability[cluster] = sum(subtree_stability[c] for c in children[cluster])
            continue
        child_sum = sum(subtree_stability[c] for c in children[cluster])
        if children[cluster] and child_sum > subtree_stability[cluster]:
            provisional[cluster] = False
            subtree_stability[cluster] = child_sum
        else:
            provisional[cluster] = True

    selected: set[int] = set()
    stack = [root]
    while stack:  # keep only the topmost provisional winners
        cluster = stack.pop()
        if provisional[cluster]:
            selected.add(cluster)
        else:
            stack.extend(children[cluster])
    return selected


def hdbscan(
    dist: np.ndarray,
    cfg: ClusterConfig = ClusterConfig(),
    return_tree: bool = False,
) -> ClusterAssignment | tuple[ClusterAssignment, CondensedTree]:
    """Cluster a distance matrix; rows not in any selected cluster are NOISE.

    Batches smaller than ``min_cluster_size`` yield all-noise with a warning
    rather than an exception, so a training loop can always proceed.
    ``min_samples`` is clipped to B-1 when the batch is that small.
    """
    cfg.validate()
    d = _check_distance_matrix(dist)
    b = d.shape[0]
    if b < cfg.min_cluster_size:
        warnings.warn(
            f"batch of {b} points is smaller than min_cluster_size={cfg.min_cluster_size}; "
            "labelling everything noise",
            stacklevel=2,
        )
        assignment = ClusterAssignment(labels=np.full(b, NOISE, dtype=np.int64), n_clusters=0)
        if return_tree:
            return assignment, CondensedTree(rows=[], stability={}, selected=set(), n_points=b)
        return assignment

    min_samples = min(cfg.resolved_min_samples, b - 1)
    mr = mutual_reachability(d, min_samples)
    edges = minimum_spanning_tree(mr)
    linkage = single_linkage(edges, b)
    rows = _condense(linkage, b, cfg.min_cluster_size)
    stability, _ = _stability(rows, b)
    selected = _select_excess_of_mass(rows, stability, b, cfg.allow_single_cluster)

    parent_of: dict[int, int] = {}
    fallout: dict[int, int] = {}
    for parent, child, _, _ in rows:
        if child >= b:
            parent_of[child] = parent
        else:
            fallout[child] = parent

    raw_labels = np.full(b, NOISE, dtype=np.int64)
    for point in range(b):
        cluster = fallout.get(point)
        while cluster is not None and cluster not in selected:
            cluster = parent_of.get(cluster)
        if cluster is not None:
            raw_labels[point] = cluster

    # Renumber to 1..P ordered by each cluster's smallest member row.
    order: list[int] = []
    for point in range(b):
        c = raw_labels[point]
        if c != NOISE and c not in order:
            order.append(int(c))
    labels = np.full(b, NOISE, dtype=np.int64)
    for new_id, old in enumerate(order, start=1):
        labels[raw_labels == old] = new_id

    assignment = ClusterAssignment(labels=labels, n_clusters=len(order))
    if return_tree:
        return assignment, CondensedTree(rows=rows, stability=stability, selected=selected, n_points=b)
    return assignment
