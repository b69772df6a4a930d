"""Comparison filters: centroid distance, one-class SVM, random eviction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import FeatureDataset, Space
from .filters import FilterReport
from .ocsvm import ConvergenceError, median_gamma, ocsvm_fit

__all__ = [
    "CentroidTable",
    "class_centroids",
    "l2_outlier_filter",
    "ocsvm_filter",
    "random_eviction_filter",
]


@dataclass(frozen=True)
class CentroidTable:
    centroids: np.ndarray
    sizes: np.ndarray


def class_centroids(ds: FeatureDataset) -> CentroidTable:
    """Per-class means; coordinates are summed with ``math.fsum`` so the
    result does not depend on point order."""
    C, d = ds.num_classes, ds.dim
    cents = np.zeros((C, d))
    sizes = np.bincount(ds.labels, minlength=C) if len(ds) else np.zeros(C, int)
    for label in range(C):
        members = ds.points[ds.labels == label]
        if len(members):
            cents[label] = [math.fsum(col) / len(members) for col in members.T]
    return CentroidTable(cents, sizes)


def l2_outlier_filter(ds: FeatureDataset, epsilon: float) -> FilterReport:
    """Drop ``floor(epsilon * s_l)`` points farthest from each class centroid."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if ds.space is not Space.FEATURE:
        raise ValueError("centroid filtering runs in feature space")
    table = class_centroids(ds)
    removed: list[int] = []
    for label, size in enumerate(table.sizes):
        drop = int(math.floor(epsilon * size + 1e-12))
        if drop == 0:
            continue
        members = np.flatnonzero(ds.labels == label)
        diff = ds.points[members] - table.centroids[label]
        d2 = (diff * diff).sum(axis=1)
        # largest distance first, then ascending id
        order = np.lexsort((ds.ids[members], -d2))
        removed.extend(int(i) for i in ds.ids[members[order[:drop]]])
    return FilterReport.removing(ds, removed, "l2_outlier", epsilon=float(epsilon))


def ocsvm_filter(ds: FeatureDataset, nu: float = 0.01, gamma: float | None = None) -> FilterReport:
    """Fit one model per class and drop points outside their own class model."""
    if ds.space is not Space.FEATURE:
        raise ValueError("one-class SVM filtering runs in feature space")
    keep = np.ones(len(ds), dtype=bool)
    for label in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == label)
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"class {label} has fewer than 2 points")
        pts = ds.points[members]
        g = median_gamma(pts) if gamma is None else gamma
        try:
            model = ocsvm_fit(pts, nu=nu, gamma=g)
        except ConvergenceError as exc:
            raise ConvergenceError(f"class {label}: {exc}") from exc
        keep[members] = ~model.is_outlier(pts)
    params = {"nu": float(nu)}
    if gamma is not None:
        params["gamma"] = float(gamma)
    return FilterReport.from_mask(ds, keep, "ocsvm", **params)


def random_eviction_filter(ds: FeatureDataset, fraction: float, seed: int) -> FilterReport:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = len(ds)
    count = int(math.floor(fraction * n + 0.5))
    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=count, replace=False) if count else np.zeros(0, int)
    return FilterReport.removing(ds, ds.ids[picked], "random_eviction", fraction=float(fraction), seed=int(seed))
