import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from mdsgnn.numerics import ShapeError, SparseMatrix, Tensor, sym_normalize

logger = logging.getLogger(__name__)

# Similarities are rounded before thresholding so that ties survive the last-bit
# noise of the row normalisation and of blocked dot products.
SIMILARITY_DECIMALS = 12
BLOCK_ROWS = 1024


@dataclass(frozen=True)
class AugmentedGraph:
    """
    kNN graph over the reconstructed features and its normalised form.

    :param knn_adjacency: Binary symmetric adjacency with zero diagonal.
    :type knn_adjacency: SparseMatrix
    :param normalized: ``D^{-1/2} A D^{-1/2}`` of ``knn_adjacency``.
    :type normalized: SparseMatrix
    :param k: Neighbour count the graph was built with.
    :type k: int
    """

    knn_adjacency: SparseMatrix
    normalized: SparseMatrix
    k: int

    @property
    def n(self) -> int:
        return self.knn_adjacency.rows

    def edge_pairs(self) -> np.ndarray:
        targets, sources = self.knn_adjacency.edge_index()
        upper = targets < sources
        return np.stack([targets[upper], sources[upper]], axis=1)


def _as_array(x: Tensor | np.ndarray) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _similarity_block(units: np.ndarray, start: int, stop: int) -> np.ndarray:
    block = np.round(units[start:stop] @ units.T, SIMILARITY_DECIMALS)
    block[np.arange(stop - start), np.arange(start, stop)] = -np.inf
    return block


def knn_graph(x_tilde: Tensor | np.ndarray, k: int) -> AugmentedGraph:
    """
    Build the augmented graph from cosine similarities of ``x_tilde`` rows.

    ``A_ij = 1`` iff ``s_ij >= min(eps_i, eps_j)``, where ``eps_i`` is the
    similarity of ``i`` to its k-th most similar other node. Self-pairs are
    excluded and every tie at the threshold is admitted, so each node keeps at
    least ``k`` neighbours. Rows of zero norm score 0 against everything.

    The input is treated as a constant.

    :raises ValueError: If ``k`` is not in ``[1, n)``.
    """
    x = _as_array(x_tilde)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k should be in [1, {n}), got {k}")

    units = _unit_rows(x)
    thresholds = np.empty(n)
    for start in range(0, n, BLOCK_ROWS):
        stop = min(start + BLOCK_ROWS, n)
        block = _similarity_block(units, start, stop)
        thresholds[start:stop] = -np.partition(-block, k - 1, axis=1)[:, k - 1]

    rows, cols = [], []
    for start in range(0, n, BLOCK_ROWS):
        stop = min(start + BLOCK_ROWS, n)
        block = _similarity_block(units, start, stop)
        limit = np.minimum(thresholds[start:stop, None], thresholds[None, :])
        hit_rows, hit_cols = np.nonzero(block >= limit)
        rows.append(hit_rows + start)
        cols.append(hit_cols)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    # union with the mirror keeps the edge set symmetric even if a pair was only
    # admitted from one side
    matrix = sp.csr_matrix(
        (np.ones(2 * len(rows)), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    )
    matrix.sum_duplicates()
    matrix.data[:] = 1.0
    adjacency = SparseMatrix(csr=matrix, symmetric=True)

    logger.debug("built kNN graph: n=%s, k=%s, %s undirected edges", n, k, adjacency.nnz // 2)
    return AugmentedGraph(knn_adjacency=adjacency, normalized=sym_normalize(adjacency), k=k)


def ppr_propagate(
    aug: AugmentedGraph,
    x_prime: Tensor | np.ndarray,
    alpha: float,
    steps: int,
) -> np.ndarray:
    """
    Approximate personalised PageRank propagation of ``x_prime``.

    Iterates ``X <- (1 - alpha) * A_norm @ X + alpha * X'`` ``steps`` times from
    ``X = X'``. The result carries no gradient.

    :raises ValueError: If ``alpha`` is outside ``(0, 1]`` or ``steps < 1``.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha should be in (0, 1], got {alpha}")
    if steps < 1:
        raise ValueError(f"steps should be at least 1, got {steps}")
    x0 = _as_array(x_prime)
    if x0.shape[0] != aug.n:
        raise ShapeError(f"features have {x0.shape[0]} rows, graph has {aug.n} nodes")

    teleport = alpha * x0
    current = x0
    for _ in range(steps):
        current = (1.0 - alpha) * np.asarray(aug.normalized.csr @ current) + teleport
    return current
