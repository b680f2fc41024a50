"""Post-training analysis: U-matrix, trend clustering, feature maps and feature clustering."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .som import GridSpec, SomModel

LINKAGES = ("average", "complete")
DEFAULT_RESTARTS = 10
DEFAULT_K_TRENDS = 20
DEFAULT_K_FEATURES = 20


class UnknownFeatureError(LookupError):
    pass


# --------------------------------------------------------------------------
# U-matrix
# --------------------------------------------------------------------------


def compute_umatrix(model: SomModel) -> np.ndarray:
    """Mean distance from each node's weight to its grid neighbours, shape (rows, cols)."""
    W = model.flat_weights
    grid = model.grid
    u = np.zeros(grid.n_nodes)
    for i, nbrs in enumerate(grid.adjacency()):
        if nbrs:
            diff = W[nbrs] - W[i]
            u[i] = np.sqrt((diff * diff).sum(axis=1)).mean()
    return u.reshape(grid.rows, grid.cols)


# --------------------------------------------------------------------------
# Trend clustering (k-means on node weights)
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrendClustering:
    k: int
    assignment: np.ndarray  # node index -> cluster id
    centroids: np.ndarray  # (k, *sample_shape)
    sse: float
    grid: GridSpec | None = None

    def as_grid(self) -> np.ndarray:
        return self.assignment.reshape(self.grid.rows, self.grid.cols)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = X[:, None, :] - C[None, :, :]
    return (d * d).sum(axis=2)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(X)))]
    closest = _sq_dists(X, X[centers]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(len(X), p=closest / total))
        else:
            idx = int(rng.integers(len(X)))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx:idx + 1]).ravel())
    return X[centers].copy()


def lloyd(X: np.ndarray, C: np.ndarray, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations from centroids `C`; empty clusters are re-seeded at the worst-fit point."""
    C = C.copy()
    k = len(C)
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            err = d[np.arange(len(X)), new]
            err[counts[new] <= 1] = -1.0  # never empty another cluster
            far = int(np.argmax(err))
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            C[empty] = X[far]
            d[far] = _sq_dists(X[far:far + 1], C).ravel()
            d[far, empty] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            C[j] = X[labels == j].mean(axis=0)
    sse = float(((X - C[labels]) ** 2).sum())
    return labels, C, sse


def kmeans(X: np.ndarray, k: int, restarts: int = DEFAULT_RESTARTS, seed: int = 0):
    """Best of `restarts` k-means++ seeded Lloyd runs by SSE. Returns (labels, centroids, sse, all_sses)."""
    X = np.asarray(X, dtype=float)
    if not 1 <= k <= len(X):
        raise ValueError(f"k={k} must be between 1 and the number of points ({len(X)})")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    sses = []
    for ss in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(ss)
        labels, C, sse = lloyd(X, kmeans_pp_init(X, k, rng))
        sses.append(sse)
        if best is None or sse < best[2]:
            best = (labels, C, sse)
    return best[0], best[1], best[2], sses


def cluster_trends(model: SomModel, k: int = DEFAULT_K_TRENDS, restarts: int = DEFAULT_RESTARTS,
                   seed: int = 0) -> TrendClustering:
    """Group map nodes (minor trends) into `k` major trends."""
    if k > model.grid.n_nodes:
        raise ValueError(f"k={k} exceeds the {model.grid.n_nodes} map nodes")
    labels, C, sse, _ = kmeans(model.flat_weights, k, restarts, seed)
    return TrendClustering(k, labels, C.reshape((k,) + model.sample_shape), sse, model.grid)


# --------------------------------------------------------------------------
# Feature vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureVector:
    feature: str
    values: np.ndarray


def feature_name(label) -> str:
    """Display name of a model label; (domain, building) pairs become ``domain@building``."""
    return f"{label[0]}@{label[1]}" if isinstance(label, tuple) else str(label)


def feature_names(model: SomModel) -> list[str]:
    if model.feature_labels:
        return [feature_name(l) for l in model.feature_labels]
    return [str(i) for i in range(model.flat_weights.shape[1])]


def extract_feature_vector(model: SomModel, feature) -> FeatureVector:
    """Component `feature` of every node weight, in node order.

    `feature` is a label, its ``domain@building`` form, a (domain, building)
    pair, or an integer column index.
    """
    names = feature_names(model)
    if isinstance(feature, tuple):
        feature = feature_name(feature)
    if isinstance(feature, (int, np.integer)) and not isinstance(feature, bool):
        if not 0 <= feature < len(names):
            raise UnknownFeatureError(f"feature index {feature} out of range 0..{len(names) - 1}")
        col = int(feature)
    else:
        try:
            col = names.index(str(feature))
        except ValueError:
            shown = ", ".join(names[:50]) + (" ..." if len(names) > 50 else "")
            raise UnknownFeatureError(f"unknown feature {feature!r}; available: {shown}") from None
    return FeatureVector(names[col], model.flat_weights[:, col].copy())


def feature_vectors(model: SomModel) -> list[FeatureVector]:
    return [FeatureVector(n, model.flat_weights[:, j].copy()) for j, n in enumerate(feature_names(model))]


def feature_map(model: SomModel, feature) -> np.ndarray:
    return extract_feature_vector(model, feature).values.reshape(model.grid.rows, model.grid.cols)


# --------------------------------------------------------------------------
# Correlation distance and feature clustering
# --------------------------------------------------------------------------


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, FeatureVector) else v, dtype=float)


def correlation_distance(v_i, v_j) -> float:
    """``1 - pearson(v_i, v_j)``; 1.0 when either vector is constant."""
    a, b = _values(v_i), _values(v_j)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("feature vectors must be 1-D, equal length, length >= 2")
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        return 1.0
    d = 1.0 - float(a @ b) / (np.sqrt(saa) * np.sqrt(sbb))
    return min(2.0, max(0.0, d))


def correlation_distance_matrix(vectors: Sequence) -> np.ndarray:
    """All pairwise correlation distances, same conventions as :func:`correlation_distance`."""
    V = np.array([_values(v) for v in vectors])
    if V.ndim != 2 or V.shape[1] < 1:
        raise ValueError("feature vectors must be 1-D, equal length, non-empty")
    Vc = V - V.mean(axis=1, keepdims=True)
    ss = (Vc * Vc).sum(axis=1)
    norms = np.sqrt(ss)
    safe = np.where(ss > 0, norms, 1.0)
    corr = (Vc @ Vc.T) / safe[:, None] / safe[None, :]
    D = np.clip(1.0 - corr, 0.0, 2.0)
    const = ss == 0
    D[const, :] = 1.0
    D[:, const] = 1.0
    return (D + D.T) / 2


@dataclass(frozen=True, eq=False)
class FeatureDendrogram:
    """Agglomerative merge tree.

    ``merges`` follows the scipy linkage layout: row ``m`` joins clusters
    ``merges[m, 0]`` and ``merges[m, 1]`` (ids below n are leaves, id
    ``n + m`` is the cluster formed at row ``m``) at height ``merges[m, 2]``
    with ``merges[m, 3]`` members. Leaves are the features in label order.
    """

    labels: tuple[str, ...]
    merges: np.ndarray

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def cut(self, k: int) -> dict[str, int]:
        """Partition into `k` clusters; ids follow the first member in label order."""
        n = len(self.labels)
        if not 1 <= k <= n:
            raise ValueError(f"k must be between 1 and {n}")
        parent = list(range(2 * n - 1))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for m in range(n - k):
            a, b = int(self.merges[m, 0]), int(self.merges[m, 1])
            parent[find(a)] = n + m
            parent[find(b)] = n + m
        ids: dict[int, int] = {}
        out: dict[str, int] = {}
        for leaf, name in enumerate(self.labels):
            root = find(leaf)
            out[name] = ids.setdefault(root, len(ids))
        return out

    def leaf_order(self) -> list[int]:
        n = len(self.labels)
        if n == 1:
            return [0]
        order: list[int] = []
        stack = [2 * n - 2]
        while stack:
            node = stack.pop()
            if node < n:
                order.append(node)
            else:
                a, b = self.merges[node - n, :2].astype(int)
                stack.extend((b, a))
        return order


@dataclass(frozen=True, eq=False)
class FeatureClustering:
    dendrogram: FeatureDendrogram
    k: int
    assignment: dict[str, int]

    def members(self) -> list[list[str]]:
        groups: list[list[str]] = [[] for _ in range(self.k)]
        for name in self.dendrogram.labels:
            groups[self.assignment[name]].append(name)
        return groups


def agglomerate(D: np.ndarray, linkage: str = "average") -> np.ndarray:
    """Agglomerative clustering of a symmetric distance matrix.

    Ties are resolved towards the lowest (row, col) pair, where a cluster is
    indexed by its smallest leaf. Returns a scipy-style linkage array.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    n = len(D)
    M = np.array(D, dtype=float)
    size = np.ones(n)
    ident = np.arange(n)
    active = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    merges = np.zeros((max(n - 1, 0), 4))
    for m in range(n - 1):
        cand = np.where(upper & active[:, None] & active[None, :], M, np.inf)
        flat = int(np.argmin(cand))
        i, j = divmod(flat, n)
        a, b = sorted((int(ident[i]), int(ident[j])))
        merges[m] = (a, b, M[i, j], size[i] + size[j])
        if linkage == "average":
            row = (size[i] * M[i] + size[j] * M[j]) / (size[i] + size[j])
        else:
            row = np.maximum(M[i], M[j])
        M[i, :] = row
        M[:, i] = row
        M[i, i] = 0.0
        size[i] += size[j]
        ident[i] = n + m
        active[j] = False
    return merges


def cluster_features(vectors: Sequence[FeatureVector], linkage: str = "average",
                     k: int = DEFAULT_K_FEATURES) -> FeatureClustering:
    """Hierarchically cluster feature vectors under correlation distance and cut at `k`."""
    if len(vectors) < 2:
        raise ValueError("need at least two features")
    if not 1 <= k <= len(vectors):
        raise ValueError(f"k must be between 1 and {len(vectors)}")
    ordered = sorted(vectors, key=lambda v: v.feature)
    labels = tuple(v.feature for v in ordered)
    if len(set(labels)) != len(labels):
        raise ValueError("feature names must be unique")
    merges = agglomerate(correlation_distance_matrix(ordered), linkage)
    dendro = FeatureDendrogram(labels, merges)
    return FeatureClustering(dendro, k, dendro.cut(k))


def heatmap_order(vectors: Sequence[FeatureVector], dendrogram: FeatureDendrogram):
    """Dendrogram leaf order as indices into `vectors`, plus the reordered distance matrix."""
    pos = {v.feature: i for i, v in enumerate(vectors)}
    if set(pos) != set(dendrogram.labels):
        raise ValueError("dendrogram and vectors describe different features")
    perm = [pos[dendrogram.labels[leaf]] for leaf in dendrogram.leaf_order()]
    D = correlation_distance_matrix([vectors[i] for i in perm])
    return perm, D


# --------------------------------------------------------------------------
# Exports
# --------------------------------------------------------------------------


def write_feature_clusters(fh: IO[str], assignment: dict[str, int]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("feature", "cluster_id"))
    for name in sorted(assignment, key=lambda n: (assignment[n], n)):
        w.writerow((name, assignment[name]))


def write_node_clusters(fh: IO[str], clustering: TrendClustering) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("node_row", "node_col", "cluster_id"))
    for i, c in enumerate(clustering.assignment):
        r, col = clustering.grid.position(i)
        w.writerow((r, col, int(c)))


def write_cluster_table(fh: IO[str], clustering: FeatureClustering) -> None:
    """Cluster id followed by its member features, one cluster per line."""
    fh.write("cluster\tfeatures\n")
    for cid, members in enumerate(clustering.members()):
        fh.write(f"{cid}\t{' '.join(members)}\n")


def read_feature_clusters(fh: IO[str]) -> dict[str, int]:
    rows = list(csv.reader(fh))
    return {name: int(cid) for name, cid in rows[1:] if name}
