"""DBSCAN pseudo-labelling and clustering-quality metrics."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

OUTLIER = -1


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 0.25
    min_pts: int = 8

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")


@dataclass
class PseudoLabeling:
    assignment: np.ndarray   # cluster id per sample, OUTLIER for noise
    num_clusters: int
    centroids: np.ndarray    # (num_clusters, D), unit rows
    round_id: int = 0

    @property
    def outlier_fraction(self) -> float:
        return float(np.mean(self.assignment == OUTLIER)) if self.assignment.size else 0.0

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)


def _neighbourhoods(x: np.ndarray, eps: float) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)) <= eps


def dbscan_assign(features, params: DbscanParams) -> np.ndarray:
    """Raw DBSCAN assignment (Euclidean, self counted as a neighbour).

    Points are scanned in index order; each unvisited core point seeds a new
    cluster that grows breadth-first. A border point within reach of several
    clusters keeps the first one that claims it, which under this scan order
    is the lowest cluster id.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    adj = _neighbourhoods(x, params.eps)
    core = adj.sum(axis=1) >= params.min_pts
    labels = np.full(n, OUTLIER, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != OUTLIER:
            continue
        labels[seed] = next_id
        frontier = deque([seed])
        while frontier:
            i = frontier.popleft()
            for j in np.flatnonzero(adj[i]):
                if labels[j] == OUTLIER:
                    labels[j] = next_id
                    if core[j]:
                        frontier.append(j)
        next_id += 1
    return labels


def centroids_of(features: np.ndarray, assignment: np.ndarray, num_clusters: int) -> np.ndarray:
    """Per-cluster mean, L2-normalized."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    cents = np.zeros((num_clusters, x.shape[1]))
    for c in range(num_clusters):
        mean = x[assignment == c].mean(axis=0)
        norm = np.linalg.norm(mean)
        cents[c] = mean / norm if norm > 0 else mean
    return cents


def dbscan(features, params: DbscanParams = DbscanParams(), round_id: int = 0) -> PseudoLabeling:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("dbscan needs at least one feature")
    assignment = dbscan_assign(x, params)
    k = int(assignment.max()) + 1 if assignment.size else 0
    return PseudoLabeling(assignment, k, centroids_of(x, assignment, k), round_id)


def _with_singletons(labels) -> np.ndarray:
    """Map labels to 0..k-1, giving each OUTLIER its own singleton cluster."""
    labels = np.asarray(labels)
    out = np.empty(labels.shape[0], dtype=np.int64)
    mapping: dict = {}
    for i, lab in enumerate(labels.tolist()):
        key = ("outlier", i) if lab == OUTLIER else lab
        out[i] = mapping.setdefault(key, len(mapping))
    return out


def _check_lengths(pred, truth):
    if len(pred) != len(truth):
        raise ValueError(f"labelings differ in length: {len(pred)} vs {len(truth)}")


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth) -> float:
    """Normalized mutual information, arithmetic-mean normalization.

    OUTLIER entries count as singleton clusters. When both labelings are a
    single cluster the score is 1.
    """
    _check_lengths(pred, truth)
    a, b = _with_singletons(pred), _with_singletons(truth)
    n = a.shape[0]
    if n == 0:
        return 1.0
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1.0)
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def bcubed_precision_recall(pred, truth) -> tuple[float, float]:
    _check_lengths(pred, truth)
    a, b = _with_singletons(pred), _with_singletons(truth)
    if a.shape[0] == 0:
        return 1.0, 1.0
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1.0)
    overlap = table[a, b]
    precision = float(np.mean(overlap / table.sum(axis=1)[a]))
    recall = float(np.mean(overlap / table.sum(axis=0)[b]))
    return precision, recall


def bcubed_f(pred, truth) -> float:
    p, r = bcubed_precision_recall(pred, truth)
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0
