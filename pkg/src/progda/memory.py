"""Momentum-averaged encoder update and the per-round negative queue."""

from __future__ import annotations

import numpy as np

from .numerics import EncoderState, ShapeError


class StaleRoundError(RuntimeError):
    pass


def momentum_update(ema: EncoderState, online: EncoderState, m: float = 0.99) -> EncoderState:
    """Return a new state with every parameter ``m * ema + (1 - m) * online``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    if not ema.same_shape(online):
        raise ShapeError("momentum encoder and online encoder differ in shape")
    layers = [(m * w_e + (1.0 - m) * w, m * b_e + (1.0 - m) * b)
              for (w_e, b_e), (w, b) in zip(ema.layers, online.layers)]
    return EncoderState(layers, ema.activation, ema.normalize)


class NegativeQueue:
    """Bounded FIFO of momentum-encoder features tagged with pseudo-labels.

    Entries all belong to the current clustering round: :meth:`refresh` empties
    the queue and advances the round, and :meth:`enqueue` rejects any other
    round id.
    """

    def __init__(self, dim: int, capacity: int = 1024, round_id: int = 0):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.dim = dim
        self.capacity = capacity
        self.round_id = round_id
        self.features = np.empty((0, dim))
        self.labels = np.empty(0, dtype=np.int64)

    def __len__(self):
        return self.labels.shape[0]

    def enqueue(self, features, labels, round_id: int) -> "NegativeQueue":
        if round_id != self.round_id:
            raise StaleRoundError(f"queue is on round {self.round_id}, got features from round {round_id}")
        feats = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if feats.shape[0] != labels.shape[0]:
            raise ValueError("one pseudo-label is required per feature")
        if feats.shape[0] == 0:
            return self
        self.features = np.concatenate([self.features, feats])[-self.capacity:]
        self.labels = np.concatenate([self.labels, labels])[-self.capacity:]
        return self

    def negatives_for(self, anchor_label: int) -> np.ndarray:
        """Queued features whose pseudo-label differs from ``anchor_label``, oldest first."""
        return self.features[self.labels != anchor_label]

    def refresh(self, new_round_id: int) -> "NegativeQueue":
        if new_round_id <= self.round_id:
            raise ValueError(f"round id must increase (current {self.round_id}, got {new_round_id})")
        self.round_id = new_round_id
        self.features = np.empty((0, self.dim))
        self.labels = np.empty(0, dtype=np.int64)
        return self
