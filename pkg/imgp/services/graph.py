from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from loguru import logger
from scipy import sparse
from scipy.sparse.linalg import LinearOperator
from scipy.spatial.distance import cdist

from imgp.constants import DETACH_THRESHOLD
from imgp.errors import EmptyCloud, KTooLarge, NonPositiveBandwidth, NumericallyDetached
from imgp.models import LaplacianKind, PointCloud
from imgp.services.utils import row_chunks
from imgp.settings import worker_count

QUERY_CHUNK = 512


def _select_nearest(d2_row, k):
    """
    Indices of the k smallest entries of d2_row, ordered by distance and,
    among equal distances, by index.
    """
    if k < d2_row.shape[0]:
        kth = np.partition(d2_row, k - 1)[k - 1]
        candidates = np.flatnonzero(d2_row <= kth)
    else:
        candidates = np.arange(d2_row.shape[0])
    order = np.lexsort((candidates, d2_row[candidates]))[:k]
    return candidates[order]


class KnnIndex:
    """
    Exact K-nearest-neighbor index: all-pairs squared distances computed in
    row blocks, partial selection per row, ties broken by the smaller index.

    Any object exposing `query_many(queries, k, exclude_self)` and
    `node_neighbors()` with the same contract can stand in for it.
    """

    def __init__(self, points, K, threads=None):
        self.points = points
        self.K = int(K)
        self.threads = worker_count(threads)

    @property
    def N(self):
        return self.points.shape[0]

    def _search_block(self, queries, k, offset, exclude_self):
        d2 = cdist(queries, self.points, "sqeuclidean")
        if exclude_self:
            rows = np.arange(queries.shape[0])
            d2[rows, offset + rows] = np.inf
        idx = np.empty((queries.shape[0], k), dtype=np.int64)
        for row in range(queries.shape[0]):
            idx[row] = _select_nearest(d2[row], k)
        return idx, np.take_along_axis(d2, idx, axis=1)

    def search(self, queries, k=None, exclude_self=False):
        """
        Return (indices, squared distances) of the k nearest training points
        for every query row. With exclude_self the queries must be the
        training points themselves and row i never returns i.
        """
        k = self.K if k is None else int(k)
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        limit = self.N - 1 if exclude_self else self.N
        if k > limit:
            raise KTooLarge(f"asked for {k} neighbors among {limit} candidates")

        chunks = row_chunks(queries.shape[0], QUERY_CHUNK)
        if self.threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(
                    pool.map(
                        lambda c: self._search_block(queries[c], k, c.start, exclude_self),
                        chunks,
                    )
                )
        else:
            parts = [self._search_block(queries[c], k, c.start, exclude_self) for c in chunks]
        idx = np.concatenate([p[0] for p in parts], axis=0)
        d2 = np.concatenate([p[1] for p in parts], axis=0)
        return idx, d2

    def query(self, x, k=None):
        """Nearest neighbors of a single ambient point: (indices, distances)."""
        idx, d2 = self.search(np.asarray(x, dtype=np.float64).reshape(1, -1), k)
        return idx[0], np.sqrt(d2[0])

    def query_many(self, queries, k=None, exclude_self=False):
        idx, d2 = self.search(queries, k, exclude_self)
        return idx, np.sqrt(d2)

    @cached_property
    def node_neighbors(self):
        """For every training node, its K nearest distinct other nodes."""
        return self.search(self.points, self.K, exclude_self=True)

    @cached_property
    def pattern(self):
        return GraphPattern.from_index(self)

    def nearest_nodes(self, queries):
        """Index of the training node each query coincides with, or -1."""
        idx, d2 = self.search(queries, 1)
        return np.where(d2[:, 0] == 0.0, idx[:, 0], -1)


def build_knn_index(cloud, K, threads=None):
    """Step 1 of the algorithm: the KNN index over the cloud's points."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.atleast_2d(cloud)
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise EmptyCloud("cannot index an empty cloud")
    if K < 1:
        raise KTooLarge(f"K must be at least 1, got {K}")
    if K >= points.shape[0]:
        raise KTooLarge(f"K={K} requires at least {K + 1} points, got {points.shape[0]}")
    index = KnnIndex(points, K, threads)
    logger.info("Built exact KNN index: N={}, d={}, K={}", index.N, points.shape[1], K)
    return index


@dataclass
class GraphPattern:
    """
    Sparsity structure of the symmetrized KNN graph with self loops, in
    row-compressed form with sorted columns, and the squared distance of
    every stored pair. Independent of the bandwidth.
    """

    indptr: np.ndarray
    indices: np.ndarray
    rows: np.ndarray
    sqdist: np.ndarray

    @classmethod
    def from_index(cls, index):
        n_nodes = index.N
        neighbors, _ = index.node_neighbors
        directed_rows = np.repeat(np.arange(n_nodes), neighbors.shape[1])
        directed = sparse.csr_matrix(
            (np.ones(directed_rows.size), (directed_rows, neighbors.ravel())),
            shape=(n_nodes, n_nodes),
        )
        # i ~ j when i is among the KNN of j or vice versa; every node loops to itself.
        structure = (directed + directed.T + sparse.identity(n_nodes, format="csr")).tocsr()
        structure.sort_indices()
        rows = np.repeat(np.arange(n_nodes), np.diff(structure.indptr))
        cols = structure.indices.astype(np.int64)
        diff = index.points[rows] - index.points[cols]
        sqdist = np.einsum("ij,ij->i", diff, diff)
        return cls(
            indptr=structure.indptr.astype(np.int64),
            indices=cols,
            rows=rows,
            sqdist=sqdist,
        )

    @property
    def N(self):
        return self.indptr.shape[0] - 1

    def matrix(self, data):
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.N, self.N))


class SparseGraph:
    """
    Density-normalized weighted KNN graph:
    tilde_adj = S_K * exp(-|x_i - x_j|^2 / (4 alpha^2)), tilde_deg its row sums,
    adj = tilde_deg^-1 tilde_adj tilde_deg^-1 and deg the row sums of adj.
    Immutable after construction.
    """

    def __init__(self, index, alpha):
        if not alpha > 0:
            raise NonPositiveBandwidth(f"graph bandwidth must be positive, got {alpha}")
        self.index = index
        self.pattern = index.pattern
        self.alpha = float(alpha)
        self.K = index.K

        rows, cols = self.pattern.rows, self.pattern.indices
        self.tilde_data = np.exp(-self.pattern.sqdist / (4.0 * self.alpha**2))
        self.tilde_deg = np.bincount(rows, weights=self.tilde_data, minlength=self.N)
        self.adj_data = self.tilde_data / (self.tilde_deg[rows] * self.tilde_deg[cols])
        self.deg = np.bincount(rows, weights=self.adj_data, minlength=self.N)

    @property
    def N(self):
        return self.pattern.N

    @property
    def points(self):
        return self.index.points

    @cached_property
    def tilde_adj(self):
        return self.pattern.matrix(self.tilde_data)

    @cached_property
    def adj(self):
        return self.pattern.matrix(self.adj_data)

    @cached_property
    def bandwidth_derivative(self):
        """
        Derivatives of adj and deg with respect to log(alpha), as a sparse
        matrix on the same pattern and a vector.
        """
        rows, cols = self.pattern.rows, self.pattern.indices
        tilde_dot = self.tilde_data * self.pattern.sqdist / (2.0 * self.alpha**2)
        tilde_deg_dot = np.bincount(rows, weights=tilde_dot, minlength=self.N)
        ratio = tilde_deg_dot / self.tilde_deg
        adj_dot = tilde_dot / (self.tilde_deg[rows] * self.tilde_deg[cols]) - self.adj_data * (
            ratio[rows] + ratio[cols]
        )
        deg_dot = np.bincount(rows, weights=adj_dot, minlength=self.N)
        return self.pattern.matrix(adj_dot), deg_dot

    def laplacian(self, kind=LaplacianKind.random_walk):
        return LaplacianOp(self, kind)

    def with_bandwidth(self, alpha):
        """Same KNN pattern, new bandwidth."""
        return SparseGraph(self.index, alpha)


def build_graph(index, alpha):
    graph = SparseGraph(index, alpha)
    logger.debug(
        "Built graph: N={}, nnz={}, alpha={:.6g}", graph.N, graph.pattern.indices.size, alpha
    )
    return graph


class LaplacianOp(LinearOperator):
    """
    One of the three graph Laplacians as a matrix-free operator:
    unnormalized D - A, symmetric I - D^-1/2 A D^-1/2, random walk I - D^-1 A.
    """

    def __init__(self, graph, kind=LaplacianKind.random_walk):
        self.graph = graph
        self.kind = LaplacianKind(kind)
        self.is_symmetric = self.kind != LaplacianKind.random_walk
        self._sqrt_deg = np.sqrt(graph.deg)
        super().__init__(dtype=np.float64, shape=(graph.N, graph.N))

    def _apply(self, v, transpose=False):
        adj, deg = self.graph.adj, self.graph.deg
        scale = (slice(None),) + (None,) * (v.ndim - 1)
        match self.kind:
            case LaplacianKind.unnormalized:
                return deg[scale] * v - adj @ v
            case LaplacianKind.symmetric:
                s = self._sqrt_deg[scale]
                return v - (adj @ (v / s)) / s
            case LaplacianKind.random_walk if transpose:
                return v - adj @ (v / deg[scale])
            case _:
                return v - (adj @ v) / deg[scale]

    def _matvec(self, v):
        return self._apply(np.ravel(v))

    def _rmatvec(self, v):
        return self._apply(np.ravel(v), transpose=True)

    def _matmat(self, V):
        return self._apply(np.asarray(V))

    def to_sparse(self):
        adj, deg = self.graph.adj, self.graph.deg
        identity = sparse.identity(self.graph.N, format="csr")
        match self.kind:
            case LaplacianKind.unnormalized:
                return (sparse.diags(deg) - adj).tocsr()
            case LaplacianKind.symmetric:
                inv_sqrt = sparse.diags(1.0 / self._sqrt_deg)
                return (identity - inv_sqrt @ adj @ inv_sqrt).tocsr()
            case _:
                return (identity - sparse.diags(1.0 / deg) @ adj).tocsr()


def laplacian(graph, kind=LaplacianKind.random_walk):
    return LaplacianOp(graph, kind)


@dataclass
class Extension:
    """Graph quantities extended to one ambient point."""

    indices: np.ndarray
    weights: np.ndarray
    degree: float
    distance: float
    tilde_degree: float
    node: int | None = None


def extend_weights(graph, x, node=None):
    """
    Extend tilde_adj, tilde_deg, adj and deg to an ambient point x over its
    K nearest training nodes, together with dist(x, M), the mean distance to
    those neighbors. With node=i the point is treated as training node i and
    row i of the graph is returned, which reproduces adj exactly.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _, dist = graph.index.query(x)
    distance = float(np.mean(dist))
    if node is not None:
        start, stop = graph.pattern.indptr[node], graph.pattern.indptr[node + 1]
        return Extension(
            indices=graph.pattern.indices[start:stop],
            weights=graph.adj_data[start:stop],
            degree=float(graph.deg[node]),
            distance=distance,
            tilde_degree=float(graph.tilde_deg[node]),
            node=int(node),
        )

    idx, d2 = graph.index.search(x.reshape(1, -1))
    idx, d2 = idx[0], d2[0]
    tilde = np.exp(-d2 / (4.0 * graph.alpha**2))
    tilde_degree = float(tilde.sum())
    if tilde_degree < DETACH_THRESHOLD:
        raise NumericallyDetached(
            f"kernel density {tilde_degree:.3g} at x underflows; use the Euclidean model"
        )
    weights = tilde / (tilde_degree * graph.tilde_deg[idx])
    return Extension(
        indices=idx,
        weights=weights,
        degree=float(weights.sum()),
        distance=distance,
        tilde_degree=tilde_degree,
    )


@dataclass
class BatchExtension:
    """
    Extended weights for many ambient points at once. `weights` is an
    m x N sparse matrix holding A(x, x_j); detached rows are empty.
    """

    weights: sparse.csr_matrix
    degree: np.ndarray
    distance: np.ndarray
    detached: np.ndarray
    nodes: np.ndarray


def extend_weights_many(graph, queries, snap=True):
    """
    Vectorized extend_weights. With snap, queries coinciding with a training
    node take node semantics.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    m = queries.shape[0]
    idx, d2 = graph.index.search(queries)
    distance = np.sqrt(d2).mean(axis=1)

    tilde = np.exp(-d2 / (4.0 * graph.alpha**2))
    tilde_degree = tilde.sum(axis=1)
    detached = tilde_degree < DETACH_THRESHOLD
    safe_degree = np.where(detached, 1.0, tilde_degree)
    values = tilde / (safe_degree[:, None] * graph.tilde_deg[idx])
    values[detached] = 0.0

    nodes = np.where(d2[:, 0] == 0.0, idx[:, 0], -1) if snap else np.full(m, -1)
    lengths = np.full(m, idx.shape[1], dtype=np.int64)
    snapped = nodes >= 0
    indptr = graph.pattern.indptr
    lengths[snapped] = indptr[nodes[snapped] + 1] - indptr[nodes[snapped]]

    out_indptr = np.concatenate([[0], np.cumsum(lengths)])
    out_indices = np.empty(out_indptr[-1], dtype=np.int64)
    out_data = np.empty(out_indptr[-1])
    for row in range(m):
        lo, hi = out_indptr[row], out_indptr[row + 1]
        if snapped[row]:
            start, stop = indptr[nodes[row]], indptr[nodes[row] + 1]
            out_indices[lo:hi] = graph.pattern.indices[start:stop]
            out_data[lo:hi] = graph.adj_data[start:stop]
        else:
            out_indices[lo:hi] = idx[row]
            out_data[lo:hi] = values[row]

    weights = sparse.csr_matrix((out_data, out_indices, out_indptr), shape=(m, graph.N))
    degree = np.asarray(weights.sum(axis=1)).ravel()
    degree[snapped] = graph.deg[nodes[snapped]]
    detached = detached & ~snapped
    if detached.any():
        logger.warning("{} of {} query points are detached from the graph", detached.sum(), m)
    return BatchExtension(
        weights=weights, degree=degree, distance=distance, detached=detached, nodes=nodes
    )
