"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.utils.validation import check_array

from .graph import Graph


def check_adjacency(adjacency, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(src, dst)`` from a square adjacency (dense, sparse or a :class:`Graph`).

    Entry ``[j, i] != 0`` means an edge ``j -> i``.
    """
    if isinstance(adjacency, Graph):
        if adjacency.num_nodes != n_nodes:
            raise ValueError(f"graph has {adjacency.num_nodes} nodes, X has {n_nodes} rows")
        return adjacency.edges()
    if sp.issparse(adjacency):
        coo = sp.coo_matrix(adjacency)
    else:
        coo = sp.coo_matrix(check_array(adjacency, accept_sparse=False, ensure_all_finite=True))
    if coo.shape != (n_nodes, n_nodes):
        raise ValueError(f"adjacency must be {n_nodes}x{n_nodes}, got {coo.shape}")
    keep = coo.data != 0
    return coo.row[keep].astype(np.int64), coo.col[keep].astype(np.int64)


def check_semi_supervised_labels(y, n_nodes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``y`` (with -1 marking unlabeled nodes) into ``(classes, encoded, labeled)``."""
    y = np.asarray(y)
    if y.shape != (n_nodes,):
        raise ValueError(f"y must have shape ({n_nodes},), got {y.shape}")
    labeled = y != -1
    if not labeled.any():
        raise ValueError("at least one node must be labeled")
    classes = np.unique(y[labeled])
    encoded = np.zeros(n_nodes, dtype=np.int64)
    encoded[labeled] = np.searchsorted(classes, y[labeled])
    return classes, encoded, labeled


def check_node_mask(mask, n_nodes: int, name: str) -> np.ndarray:
    if mask is None:
        return np.zeros(n_nodes, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype != bool:
        idx = mask.astype(np.int64)
        mask = np.zeros(n_nodes, dtype=bool)
        mask[idx] = True
    if mask.shape != (n_nodes,):
        raise ValueError(f"{name} must be a boolean mask over {n_nodes} nodes")
    return mask
