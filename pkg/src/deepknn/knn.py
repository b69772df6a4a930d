"""Plurality-vote filtering of a training set by exact k nearest neighbours."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import FeatureDataset, Space
from .filters import FilterReport

__all__ = ["NeighborSet", "knn_query", "deep_knn_filter", "neighbor_table"]

# upper bound on elements in one (block, n) distance matrix
_BLOCK_ELEMS = 1 << 22


@dataclass(frozen=True)
class NeighborSet:
    query_id: int
    neighbor_ids: tuple[int, ...]
    distances: tuple[float, ...]


def _check(ds: FeatureDataset, k: int) -> None:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if ds.space is not Space.FEATURE:
        raise ValueError("k-NN filtering runs in feature space")
    if len(ds) < 2:
        raise ValueError("need at least 2 points")


def neighbor_table(ds: FeatureDataset, k: int, queries: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(query_positions, neighbor_positions, sq_distances)`` per block.

    Positions index ``ds``.  Each row lists the ``min(k, n-1)`` nearest other
    points, ascending by distance and then by id.
    """
    n = len(ds)
    m = min(k, n - 1)
    by_id = np.argsort(ds.ids, kind="stable")
    pts = ds.points[by_id]
    # rank[pos] = column of that point in the id-sorted layout
    rank = np.empty(n, dtype=np.int64)
    rank[by_id] = np.arange(n)
    if queries is None:
        queries = np.arange(n)
    block = max(1, _BLOCK_ELEMS // n)
    for start in range(0, len(queries), block):
        q = queries[start : start + block]
        # per-pair differences keep exact duplicates at distance 0
        d2 = cdist(ds.points[q], pts, "sqeuclidean")
        d2[np.arange(len(q)), rank[q]] = np.inf
        # stable sort over id-ordered columns breaks distance ties by id
        order = np.argsort(d2, axis=1, kind="stable")[:, :m]
        yield q, by_id[order], np.take_along_axis(d2, order, axis=1)


def knn_query(ds: FeatureDataset, query_id: int, k: int) -> NeighborSet:
    _check(ds, k)
    pos = ds.index_of(query_id)
    _, nbr, d2 = next(neighbor_table(ds, k, np.array([pos])))
    return NeighborSet(
        int(query_id),
        tuple(int(i) for i in ds.ids[nbr[0]]),
        tuple(float(v) for v in np.sqrt(d2[0])),
    )


def deep_knn_filter(ds: FeatureDataset, k: int) -> FilterReport:
    """Keep a point iff its label is among the modal labels of its k neighbours.

    The query point is excluded from its own neighbourhood and co-modal
    labels all count as modes, so ties keep the point.  Votes are taken
    against the unfiltered set in a single pass.
    """
    _check(ds, k)
    n = len(ds)
    C = max(ds.num_classes, 1)
    keep = np.empty(n, dtype=bool)
    for q, nbr, _ in neighbor_table(ds, k):
        lab = ds.labels[nbr]
        flat = lab + (np.arange(len(q)) * C)[:, None]
        counts = np.bincount(flat.ravel(), minlength=len(q) * C).reshape(len(q), C)
        own = counts[np.arange(len(q)), ds.labels[q]]
        keep[q] = own == counts.max(axis=1)
    return FilterReport.from_mask(ds, keep, "deep_knn", k=int(k))
