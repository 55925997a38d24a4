"""Retrieval metrics: mAP and CMC over a query/gallery split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray       # cmc[k-1] = rank-k accuracy
    num_queries: int
    skipped: int = 0

    @property
    def rank1(self) -> float:
        return float(self.cmc[0]) if self.cmc.size else 0.0


def evaluate(query_features, query_labels, query_cams, gallery_features, gallery_labels,
             gallery_cams, gallery_ids=None, max_rank: int | None = None) -> RetrievalResult:
    """Rank the gallery for every query by Euclidean distance.

    Gallery items with the query's label *and* camera are removed from that
    query's ranking. Distance ties go to the lower gallery instance id (the
    gallery position when ids are not given). Queries without any relevant
    gallery item are skipped and counted in ``skipped``.
    """
    q = np.atleast_2d(np.asarray(query_features, dtype=np.float64))
    g = np.atleast_2d(np.asarray(gallery_features, dtype=np.float64))
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("query and gallery must be nonempty")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    q_lab, q_cam = np.asarray(query_labels), np.asarray(query_cams)
    g_lab, g_cam = np.asarray(gallery_labels), np.asarray(gallery_cams)
    g_ids = np.arange(g.shape[0]) if gallery_ids is None else np.asarray(gallery_ids)
    max_rank = g.shape[0] if max_rank is None else max_rank

    diff = q[:, None, :] - g[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))

    aps = []
    hits = np.zeros(max_rank)
    valid = 0
    for i in range(q.shape[0]):
        keep = ~((g_lab == q_lab[i]) & (g_cam == q_cam[i]))
        idx = np.flatnonzero(keep)
        order = idx[np.lexsort((g_ids[idx], dist[i, idx]))]
        match = g_lab[order] == q_lab[i]
        if not match.any():
            continue
        valid += 1
        ranks = np.flatnonzero(match) + 1
        aps.append(float(np.mean(np.arange(1, ranks.size + 1) / ranks)))
        first = ranks[0]
        if first <= max_rank:
            hits[first - 1:] += 1
    skipped = q.shape[0] - valid
    if valid == 0:
        return RetrievalResult(0.0, np.zeros(max_rank), 0, skipped)
    return RetrievalResult(float(np.mean(aps)), hits / valid, valid, skipped)


def split_query_gallery(labels, every: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic split: every ``every``-th sample of each class is a query."""
    labels = np.asarray(labels)
    query = np.zeros(labels.size, dtype=bool)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        query[members[::every]] = True
    return np.flatnonzero(query), np.flatnonzero(~query)
