from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from progda.schedule import (JOINT, KINDS, PRETRAIN, TARGET_ONLY, SchedulePolicy, phase_of,
                             weights_at)


def reference_weights(kind, e, e1=20, e2=50, e3=80, k=3, ls=0.2, lt=0.8):
    """Piecewise definitions written out branch by branch, in exact arithmetic."""
    if e <= e1:
        return 1.0, 0.0
    if e > e2:
        return 0.0, 1.0
    if kind == "two_stage":
        return 0.0, 1.0
    if kind == "static":
        return ls, lt
    if kind == "linear":
        w = Fraction(e, e1 - e2) + Fraction(e2, e2 - e1)
        w = min(Fraction(1), max(Fraction(0), w))
    else:
        length = (e2 - e1) // k
        segment = min((e - e1 - 1) // length + 1, k)
        w = 1 - Fraction(segment, k + 1)
    return float(w), 1.0 - float(w)


def test_pretrain_example():
    for kind in KINDS:
        assert weights_at(SchedulePolicy(kind=kind), 10) == (1.0, 0.0)


def test_linear_midpoint_example():
    assert weights_at(SchedulePolicy(kind="linear"), 35) == (0.5, 0.5)


def test_three_step_example():
    policy = SchedulePolicy(kind="k_step", k=3)
    assert weights_at(policy, 45) == (0.25, 0.75)
    assert [weights_at(policy, e)[0] for e in (21, 30, 31, 40, 41, 50)] == [0.75, 0.75, 0.5, 0.5, 0.25, 0.25]


def test_phase_boundaries():
    p = SchedulePolicy()
    assert phase_of(p, 20) == PRETRAIN
    assert phase_of(p, 21) == JOINT
    assert phase_of(p, 50) == JOINT
    assert phase_of(p, 51) == TARGET_ONLY


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("k", [1, 2, 3, 4, 7])
def test_every_epoch_matches_reference(kind, k):
    p = SchedulePolicy(kind=kind, k=k)
    for e in range(1, 81):
        assert weights_at(p, e) == reference_weights(kind, e, k=k)


def test_remainder_goes_to_last_segment():
    p = SchedulePolicy(kind="k_step", k=4, e1=20, e2=50)  # segments of 7, last has 9
    assert weights_at(p, 41)[0] == 0.4
    assert weights_at(p, 42)[0] == 0.2
    assert weights_at(p, 50)[0] == 0.2
    assert weights_at(p, 34)[0] == 0.6


@pytest.mark.parametrize("e", [0, 81, -3])
def test_out_of_range(e):
    with pytest.raises(ValueError):
        weights_at(SchedulePolicy(), e)


def test_policy_validation():
    with pytest.raises(ValueError):
        SchedulePolicy(kind="cosine")
    with pytest.raises(ValueError):
        SchedulePolicy(e1=50, e2=20)
    with pytest.raises(ValueError):
        SchedulePolicy(k=0)
    with pytest.raises(ValueError):
        SchedulePolicy(kind="static", lambda_s=-0.1)


policies = st.builds(
    lambda kind, e1, span, tail, k: SchedulePolicy(kind=kind, e1=e1, e2=e1 + span, e3=e1 + span + tail,
                                                   k=min(k, span)),
    st.sampled_from(["two_stage", "k_step", "linear"]), st.integers(1, 30), st.integers(1, 40),
    st.integers(0, 30), st.integers(1, 8))


@given(policies)
def test_sum_to_one_and_monotone(p):
    prev_s, prev_t = 2.0, -1.0
    for e in range(1, p.e3 + 1):
        s, t = weights_at(p, e)
        assert s + t == 1.0
        assert s <= prev_s and t >= prev_t
        prev_s, prev_t = s, t


@pytest.mark.parametrize("k", [2, 3, 4])
def test_k_step_tracks_linear_at_segment_midpoints(k):
    e1, e2 = 20, 50
    step, linear = SchedulePolicy(kind="k_step", k=k), SchedulePolicy(kind="linear")
    length = (e2 - e1) // k
    for i in range(k):
        mid = e1 + i * length + length // 2 + 1
        assert abs(weights_at(step, mid)[0] - weights_at(linear, mid)[0]) <= 1 / (k + 1) + length / (e2 - e1)
