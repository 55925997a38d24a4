"""Source/target loss-weight schedules over training epochs.

Epochs are 1-based. Phases: pretrain on (0, e1], joint on (e1, e2],
target-only on (e2, e3].
"""

from __future__ import annotations

from dataclasses import dataclass

KINDS = ("two_stage", "k_step", "linear", "static")

PRETRAIN = "pretrain"
JOINT = "joint"
TARGET_ONLY = "target_only"


@dataclass(frozen=True)
class SchedulePolicy:
    kind: str = "k_step"
    k: int = 3
    e1: int = 20
    e2: int = 50
    e3: int = 80
    lambda_s: float = 0.2
    lambda_t: float = 0.8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"schedule kind must be one of {KINDS}, got {self.kind!r}")
        if not (0 < self.e1 < self.e2 <= self.e3):
            raise ValueError(f"need 0 < e1 < e2 <= e3, got {self.e1}, {self.e2}, {self.e3}")
        if self.kind == "k_step" and not 1 <= self.k <= self.e2 - self.e1:
            raise ValueError(f"k must be in [1, e2 - e1], got {self.k}")
        if self.lambda_s < 0 or self.lambda_t < 0:
            raise ValueError("static weights must be non-negative")


def _check_epoch(policy: SchedulePolicy, e: int):
    if not 1 <= e <= policy.e3:
        raise ValueError(f"epoch {e} outside [1, {policy.e3}]")


def phase_of(policy: SchedulePolicy, e: int) -> str:
    _check_epoch(policy, e)
    if e <= policy.e1:
        return PRETRAIN
    if e > policy.e2:
        return TARGET_ONLY
    return JOINT


def k_step_weight(e: int, e1: int, e2: int, k: int) -> float:
    """Source weight on (e1, e2] split into k segments; segment i uses 1 - i/(k+1).

    Segments are floor((e2 - e1) / k) epochs long, the last one absorbing the
    remainder.
    """
    seg_len = (e2 - e1) // k
    i = min((e - e1 - 1) // seg_len, k - 1) + 1
    return (k + 1 - i) / (k + 1)


def linear_weight(e: int, e1: int, e2: int) -> float:
    # Same line as e/(e1-e2) + e2/(e2-e1), written with a single rounding.
    w = (e2 - e) / (e2 - e1)
    return min(1.0, max(0.0, w))


def weights_at(policy: SchedulePolicy, e: int) -> tuple[float, float]:
    """(lambda_s, lambda_t) for epoch ``e``."""
    phase = phase_of(policy, e)
    if phase == PRETRAIN:
        return 1.0, 0.0
    if phase == TARGET_ONLY or policy.kind == "two_stage":
        return 0.0, 1.0
    if policy.kind == "static":
        return policy.lambda_s, policy.lambda_t
    if policy.kind == "linear":
        w = linear_weight(e, policy.e1, policy.e2)
    else:
        w = k_step_weight(e, policy.e1, policy.e2, policy.k)
    return w, 1.0 - w
