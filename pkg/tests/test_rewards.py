import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from amenable.errors import ConfigError
from amenable.rewards import RewardClipper, RewardStrategy, clip, unclipped_reward

unit = st.floats(0, 1)


@st.composite
def losses_scores(draw, min_size=1, max_size=30):
    n = draw(st.integers(min_size, max_size))
    return (
        np.array(draw(st.lists(unit, min_size=n, max_size=n))),
        np.array(draw(st.lists(unit, min_size=n, max_size=n))),
    )


def test_fixed_example():
    assert unclipped_reward(RewardStrategy("fixed"), [0.2, 0.4]) == pytest.approx(-0.3, abs=1e-12)


def test_weighted_example():
    assert unclipped_reward(RewardStrategy("weighted"), [1, 0], [0.5, 1.0]) == pytest.approx(-0.25, abs=1e-12)


def test_selective_keeps_floor_of_fraction():
    s = RewardStrategy("selective", s_rej=0.15)
    assert s.n_kept(20) == 17
    losses = np.arange(20, dtype=float) / 20
    scores = 1 - losses  # highest score on the smallest loss
    assert unclipped_reward(s, losses, scores) == pytest.approx(-losses[:17].mean(), abs=1e-12)


def test_selective_ties_broken_by_index():
    s = RewardStrategy("selective", s_rej=0.5)
    # equal scores: the first two samples are kept
    assert unclipped_reward(s, [0.0, 0.2, 1.0, 1.0], [0.5] * 4) == pytest.approx(-0.1, abs=1e-12)


def test_selective_empty_kept_set():
    with pytest.raises(ConfigError, match="M' would be 0"):
        unclipped_reward(RewardStrategy("selective", s_rej=0.9), [0.1] * 5, [0.5] * 5)


def test_bad_strategy():
    with pytest.raises(ConfigError):
        RewardStrategy("median")
    with pytest.raises(ConfigError):
        RewardStrategy("selective", s_rej=1.0)


@given(losses_scores(), st.sampled_from([0.0, 0.1, 0.3]), st.sampled_from(["fixed", "weighted", "selective"]))
def test_rewards_in_unit_interval(ls, s_rej, kind):
    losses, scores = ls
    strategy = RewardStrategy(kind, s_rej if kind == "selective" else 0.0)
    if kind == "selective" and strategy.n_kept(losses.size) < 1:
        return
    r = unclipped_reward(strategy, losses, scores)
    assert -1.0 - 1e-12 <= r <= 0.0


@given(losses_scores(), st.integers(0, 29), st.floats(0, 1))
def test_weighted_monotone_in_scores(ls, j, frac):
    losses, scores = ls
    j %= losses.size
    lowered = scores.copy()
    lowered[j] *= frac
    s = RewardStrategy("weighted")
    assert unclipped_reward(s, losses, lowered) >= unclipped_reward(s, losses, scores) - 1e-15


@given(losses_scores(min_size=2), st.randoms(use_true_random=False))
def test_selective_permutation_covariant(ls, rnd):
    losses, scores = ls
    # distinct scores so the kept set does not depend on tie-breaking order
    scores = scores + np.arange(scores.size) * 1e-6
    perm = list(range(losses.size))
    rnd.shuffle(perm)
    s = RewardStrategy("selective", s_rej=0.25)
    a = unclipped_reward(s, losses, scores)
    b = unclipped_reward(s, losses[perm], scores[perm])
    assert a == pytest.approx(b, abs=1e-12)


# -- clipper -----------------------------------------------------------------


def test_clip_first_call():
    reward, c = clip(RewardClipper(), -0.5)
    assert reward == 0.0 and c.running_mean == -0.5 and c.initialized


def test_clip_recurrence_example():
    c = RewardClipper(alpha=0.9, running_mean=-0.5, initialized=True)
    reward, c2 = clip(c, -0.3)
    assert reward == pytest.approx(0.2, abs=1e-12)
    assert c2.running_mean == pytest.approx(-0.48, abs=1e-12)


@given(st.lists(st.floats(-1, 0), min_size=1, max_size=50), st.floats(0, 1))
def test_clip_matches_direct_fold(stream, alpha):
    c = RewardClipper(alpha=alpha)
    prev = None
    for r in stream:
        reward, c = clip(c, r)
        expected = 0.0 if prev is None else r - prev
        assert reward == pytest.approx(expected, abs=1e-12)
        prev = r if prev is None else alpha * prev + (1 - alpha) * r
    assert c.running_mean == pytest.approx(prev, abs=1e-12)


def test_constant_stream_converges_to_zero():
    c = RewardClipper()
    for _ in range(100):
        reward, c = clip(c, -0.3)
    assert abs(reward) < 1e-6 * 0.3


def test_constant_stream_from_a_distant_baseline_decays_geometrically():
    c = RewardClipper(running_mean=0.0, initialized=True)
    for t in range(200):
        reward, c = clip(c, -0.3)
        assert reward == pytest.approx(-0.3 * 0.9**t, abs=1e-12)
    assert abs(reward) < 1e-6 * 0.3


def test_clip_modes():
    c = RewardClipper(mode="external", running_mean=-0.5, initialized=True)
    assert clip(c, -0.2, baseline=-0.4)[0] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        clip(c, -0.2)
    assert clip(RewardClipper(mode="none"), -0.7)[0] == -0.7


def test_clip_rejects_non_finite():
    with pytest.raises(ValueError):
        clip(RewardClipper(), math.nan)


def test_reset():
    _, c = clip(RewardClipper(), -0.5)
    assert c.reset() == RewardClipper()
