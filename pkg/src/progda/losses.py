"""Training objectives with analytic gradients.

Every loss returns a :class:`LossValue` whose ``grads`` dict is keyed by the
name of the input it differentiates (``"features"``, ``"positives"``,
``"head.weight"``...). Batch losses are means over their valid rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fourier


class DegenerateBatchError(ValueError):
    """A batch cannot produce a loss (no negatives, no valid triplet anchor...)."""


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, c: float) -> "LossValue":
        return LossValue(c * self.value, {k: c * g for k, g in self.grads.items()})

    def renamed(self, prefix: str) -> "LossValue":
        return LossValue(self.value, {f"{prefix}{k}": g for k, g in self.grads.items()})

    def __add__(self, other: "LossValue") -> "LossValue":
        grads = dict(self.grads)
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossValue(self.value + other.value, grads)


ZERO = LossValue(0.0)


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (C, D)
    bias: np.ndarray    # (C,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"head weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.weight.T + self.bias

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weight.copy(), self.bias.copy())


def random_head(num_classes: int, dim: int, rng: np.random.Generator, scale: float = 0.01) -> ClassifierHead:
    return ClassifierHead(rng.normal(0.0, scale, size=(num_classes, dim)), np.zeros(num_classes))


def init_head_from_centroids(labeling) -> ClassifierHead:
    """One row per cluster, each the unit-normalized centroid; zero bias.

    Accepts a :class:`~progda.clustering.PseudoLabeling` or a centroid array.
    """
    centroids = getattr(labeling, "centroids", labeling)
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if centroids.shape[0] == 0:
        raise ValueError("cannot build a classifier head from zero clusters")
    rows = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    return ClassifierHead(rows, np.zeros(rows.shape[0]))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_logits(logits, labels) -> LossValue:
    """Mean softmax cross-entropy; gradient keyed ``"logits"``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"{labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range for {c} classes")
    logp = _log_softmax(logits)
    value = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return LossValue(float(value), {"logits": grad / n})


def cross_entropy(head: ClassifierHead, features, labels) -> LossValue:
    """Softmax cross-entropy of ``head(features)``.

    Gradients: ``features``, ``head.weight``, ``head.bias``.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    ce = cross_entropy_logits(head.logits(feats), labels)
    g = ce.grads["logits"]
    return LossValue(ce.value, {
        "features": g @ head.weight,
        "head.weight": g.T @ feats,
        "head.bias": g.sum(axis=0),
    })


def fourier_ce(head: ClassifierHead, features, labels, eps: float = fourier.TRAIN_EPS) -> LossValue:
    """Cross-entropy on the amplitude spectrum of the features, via its own head."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    amp = fourier.amplitude_of(feats, eps)
    ce = cross_entropy(head, amp, labels)
    ce.grads["features"] = fourier.amplitude_backward(feats, ce.grads["features"], eps)
    return ce


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def triplet_loss(features, labels, margin: float = 0.3) -> LossValue:
    """Batch-hard triplet loss with Euclidean distance.

    For every anchor with at least one positive and one negative in the batch:
    max(0, d(a, farthest positive) - d(a, closest negative) + margin).
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    n = x.shape[0]
    dist = pairwise_distances(x)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise DegenerateBatchError("triplet loss needs >=2 classes and a class with >=2 samples")

    hp = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hn = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    rows = np.arange(n)
    hinge = dist[rows, hp] - dist[rows, hn] + margin
    active = valid & (hinge > 0)
    n_valid = int(valid.sum())
    value = float(np.where(active, hinge, 0.0).sum() / n_valid)

    grad = np.zeros_like(x)
    for i in np.flatnonzero(active):
        for j, sign in ((hp[i], 1.0), (hn[i], -1.0)):
            d = dist[i, j]
            if d > 0:
                u = sign * (x[i] - x[j]) / (d * n_valid)
                grad[i] += u
                grad[j] -= u
    return LossValue(value, {"features": grad})


@dataclass
class ContrastiveBatch:
    """Anchors and their in-batch positives (both from the trainable encoder) and
    per-anchor negatives taken from the queue (momentum encoder, no gradient)."""

    anchors: np.ndarray                 # (N, D)
    positives: np.ndarray               # (N, D)
    negatives: Sequence[np.ndarray]     # N arrays of shape (M_i, D)
    labels: np.ndarray | None = None    # anchor pseudo-labels, informational

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        self.positives = np.atleast_2d(np.asarray(self.positives, dtype=np.float64))
        if self.anchors.shape != self.positives.shape:
            raise ValueError("anchors and positives must have the same shape")
        if len(self.negatives) != self.anchors.shape[0]:
            raise ValueError("one negative set is required per anchor")


def ccl_loss(batch: ContrastiveBatch, tau: float = 0.07, include_positive: bool = True) -> LossValue:
    """Cluster-wise contrastive loss, averaged over anchors.

    Per anchor a with positive p and negatives n_j:
        -log( exp(a.p/tau) / Z ),  Z = sum_j exp(a.n_j/tau) [+ exp(a.p/tau)].
    Gradients flow to ``anchors`` and ``positives`` only.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a, p = batch.anchors, batch.positives
    n = a.shape[0]
    grad_a = np.zeros_like(a)
    grad_p = np.zeros_like(p)
    total = 0.0
    for i in range(n):
        negs = np.atleast_2d(np.asarray(batch.negatives[i], dtype=np.float64))
        if negs.size == 0:
            raise DegenerateBatchError(f"anchor {i} has no negatives")
        s_pos = a[i] @ p[i] / tau
        s_neg = negs @ a[i] / tau
        logits = np.concatenate([[s_pos], s_neg]) if include_positive else s_neg
        top = logits.max()
        w = np.exp(logits - top)
        lse = top + np.log(w.sum())
        w /= w.sum()
        total += lse - s_pos
        if include_positive:
            wp, wn = w[0], w[1:]
        else:
            wp, wn = 0.0, w
        grad_a[i] = ((wp - 1.0) * p[i] + wn @ negs) / (tau * n)
        grad_p[i] = (wp - 1.0) * a[i] / (tau * n)
    return LossValue(total / n, {"anchors": grad_a, "positives": grad_p})


def hardest_positive_indices(features: np.ndarray, labels) -> np.ndarray:
    """Index of the lowest-similarity same-label sample (excluding self), -1 if none."""
    labels = np.asarray(labels)
    sim = features @ features.T
    same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    idx = np.where(same, sim, np.inf).argmin(axis=1)
    idx[~same.any(axis=1)] = -1
    return idx


@dataclass
class SourceTerms:
    ce: LossValue = ZERO
    triplet: LossValue = ZERO

    def total(self) -> LossValue:
        return self.ce + self.triplet


@dataclass
class TargetTerms:
    ccl: LossValue = ZERO
    ce: LossValue = ZERO
    triplet: LossValue = ZERO
    fourier_ce: LossValue = ZERO

    def spatial(self) -> LossValue:
        return self.ce + self.triplet


def combined_loss(source: SourceTerms, target: TargetTerms, lambda_s: float, lambda_t: float,
                  delta: float, gamma: float) -> LossValue:
    """lambda_s * L_src + lambda_t * (delta * L_ccl + gamma * L_spa + (1 - gamma) * L_fre).

    Component gradients must already carry distinct keys; shared keys are summed.
    Zero-weighted terms are dropped so they contribute no gradient at all.
    """
    for name, v in (("lambda_s", lambda_s), ("lambda_t", lambda_t), ("delta", delta), ("gamma", gamma)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative")
    if gamma > 1:
        raise ValueError("gamma must be <= 1")
    parts = [
        (lambda_s, source.total()),
        (lambda_t * delta, target.ccl),
        (lambda_t * gamma, target.spatial()),
        (lambda_t * (1.0 - gamma), target.fourier_ce),
    ]
    out = LossValue(0.0)
    for coef, term in parts:
        if coef != 0.0:
            out = out + term.scaled(coef)
    return out

