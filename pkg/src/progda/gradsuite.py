"""Finite-difference checks of every loss gradient, seeded and repeatable."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .losses import ClassifierHead, ContrastiveBatch
from .numerics import backprop, encode, finite_diff_check, init_encoder, layer_grads_to_params

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _ce(rng):
    labels = rng.integers(0, 3, size=5)
    params = {"features": rng.normal(size=(5, 4)), "head.weight": rng.normal(size=(3, 4)),
              "head.bias": rng.normal(size=3)}

    def fn(p):
        lv = losses.cross_entropy(ClassifierHead(p["head.weight"], p["head.bias"]), p["features"], labels)
        return lv.value, lv.grads
    return fn, params


def _triplet(rng):
    labels = np.repeat([0, 1, 2], 3)

    def fn(p):
        lv = losses.triplet_loss(p["features"], labels, margin=1.0)
        return lv.value, lv.grads
    return fn, {"features": rng.normal(size=(9, 4))}


def _ccl(include_positive):
    def build(rng):
        negs = [_unit(rng, int(m), 6) for m in rng.integers(1, 8, size=4)]

        def fn(p):
            lv = losses.ccl_loss(ContrastiveBatch(p["anchors"], p["positives"], negs), 0.5, include_positive)
            return lv.value, lv.grads
        return fn, {"anchors": _unit(rng, 4, 6), "positives": _unit(rng, 4, 6)}
    return build


def _fourier_end_to_end(rng):
    enc = init_encoder(6, out_dim=8, hidden=10, seed=int(rng.integers(2 ** 31)))
    x = rng.normal(size=(4, 6))
    labels = rng.integers(0, 3, size=4)
    params = {**enc.params(), "head.weight": rng.normal(size=(3, 8)), "head.bias": rng.normal(size=3)}

    def fn(p):
        state = enc.with_params(p)
        lv = losses.fourier_ce(ClassifierHead(p["head.weight"], p["head.bias"]), encode(state, x), labels)
        grads, _ = backprop(state, x, lv.grads["features"])
        return lv.value, {**layer_grads_to_params(grads), "head.weight": lv.grads["head.weight"],
                          "head.bias": lv.grads["head.bias"]}
    return fn, params


CHECKS: dict[str, Callable] = {
    "cross_entropy": _ce,
    "triplet": _triplet,
    "ccl_with_positive": _ccl(True),
    "ccl_without_positive": _ccl(False),
    "fourier_ce_end_to_end": _fourier_end_to_end,
}


def run_suite(seeds: int = 20, h: float = 1e-5) -> list[CheckResult]:
    results = []
    for name, build in CHECKS.items():
        for seed in range(seeds):
            fn, params = build(np.random.default_rng(seed))
            results.append(CheckResult(name, seed, finite_diff_check(fn, params, h).max_rel_error))
    return results
