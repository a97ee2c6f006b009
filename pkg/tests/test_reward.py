import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capspoof.reward import (BigramCosine, RewardBreakdown, SurrogatePair, TokenJaccard, batch_scores,
                             combine_semantic, normalize_group, position_weights, rollout_token_rewards,
                             semantic_score, sigmoid_reward, surrogate_token_rewards, token_reward)
from capspoof.toylm import ContextKey, ToyLM, make_rewrite_prompt

seqs = st.lists(st.integers(0, 15), min_size=1, max_size=30)


def test_token_reward_examples():
    assert token_reward(0.7, math.log(0.3), math.log(0.3)) == 0.0
    assert token_reward(0.0, -1.0, -3.0) == 0.0
    assert token_reward(0.5, math.log(0.2), math.log(0.1)) == pytest.approx(0.34657359027997264, abs=1e-15)


def test_position_weights():
    rows = np.array([[0.7, 0.2, 0.1], [0.25, 0.25, 0.5]])
    assert np.allclose(position_weights(rows, "capacity"), [0.3, 0.5])
    assert np.allclose(position_weights(rows, "pmax"), [0.7, 0.5])
    assert np.array_equal(position_weights(rows, "uniform"), [1.0, 1.0])
    with pytest.raises(ValueError):
        position_weights(rows, "bogus")


def test_rollout_rewards_match_stepwise_oracle():
    lm = ToyLM(seed=2)
    rng = np.random.default_rng(0)
    human, wm, x = (rng.integers(0, 64, 12) for _ in range(3))
    pair = SurrogatePair(tuple(human), tuple(wm), lm)
    rb = rollout_token_rewards(pair, x)
    for t in range(12):
        w = tuple(x[max(0, t - 2):t])
        ph = lm.next_dist(ContextKey(make_rewrite_prompt(human), w, int(human[t])))
        pw = lm.next_dist(ContextKey(make_rewrite_prompt(wm), w, int(wm[t])))
        c = 1 - ph.max()
        assert rb.c[t] == pytest.approx(c, abs=1e-12)
        assert rb.r[t] == pytest.approx(c * math.log(pw[x[t]] / ph[x[t]]), abs=1e-10)
    assert np.array_equal(rb.r, rollout_token_rewards(pair, x).r)


def test_identical_surrogates_give_zero_reward():
    lm = ToyLM()
    src = np.random.default_rng(1).integers(0, 64, 20)
    x = np.random.default_rng(2).integers(0, 64, 20)
    assert np.all(rollout_token_rewards(SurrogatePair(tuple(src), tuple(src), lm), x).r == 0)


def test_surrogate_rewards_reject_empty():
    with pytest.raises(ValueError):
        surrogate_token_rewards(ToyLM(), np.zeros((1, 0), dtype=int), np.zeros((1, 3)), np.zeros((1, 3)))


def test_reward_breakdown_json():
    rb = RewardBreakdown(np.array([0.1]), np.array([2.0]), np.array([0.2]), 0.9, 0.8, 0.5, 0.1)
    rec = json.loads(rb.to_json())
    assert rec["r"] == [0.2] and rec["sem_wm"] == 0.8


def test_semantic_score_examples():
    s = BigramCosine()
    assert semantic_score(s, [1, 2, 3], [1, 2, 3]) == 1.0
    assert semantic_score(s, [1, 2, 3], [4, 5, 6]) == 0.0
    # one shared bigram (1,2): 3 vs 4 distinct bigrams
    assert semantic_score(s, [1, 2, 3, 4], [1, 2, 9, 10, 11]) == pytest.approx(0.28867513459481287, abs=1e-15)
    with pytest.raises(ValueError):
        semantic_score(s, [], [1])


@settings(max_examples=200)
@given(seqs, seqs)
def test_bigram_cosine_symmetric_bounded(a, b):
    s = BigramCosine()
    assert s(a, b) == pytest.approx(s(b, a), abs=1e-15)
    assert 0 <= s(a, b) <= 1
    assert s(a, a) == 1.0


@settings(max_examples=100)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_bigram_batch_matches_scalar(T, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.integers(0, 8, (5, T)), rng.integers(0, 8, (5, T))
    ref = [BigramCosine()(a, b) for a, b in zip(A, B)]
    assert np.allclose(batch_scores(BigramCosine(), A, B), ref, atol=1e-12)


def test_jaccard_drop_in():
    assert TokenJaccard()([1, 2, 3], [2, 3, 4]) == 0.5
    assert np.allclose(batch_scores(TokenJaccard(), np.array([[1, 2]]), np.array([[1, 2]])), [1.0])


def test_sigmoid_reward_examples():
    assert sigmoid_reward(0.85) == pytest.approx(0.0, abs=1e-15)
    assert abs(sigmoid_reward(1.0) - 0.95) <= 1e-9
    assert abs(sigmoid_reward(0.7) + 0.95) <= 1e-9


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1))
def test_sigmoid_strictly_increasing_and_bounded(a, b):
    ra, rb = sigmoid_reward(a), sigmoid_reward(b)
    assert -1 < ra < 1
    if a < b - 1e-9:
        assert ra < rb


def test_combine_semantic_examples():
    assert combine_semantic(0.9, 0.6, "Min") == 0.6
    assert combine_semantic(0.9, 0.6, "Avg") == pytest.approx(0.75)
    assert combine_semantic(0.9, 0.6, "Hum") == 0.9
    assert combine_semantic(0.9, 0.6, "WM") == 0.6
    with pytest.raises(ValueError):
        combine_semantic(0.9, 0.6, "Max")


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1))
def test_min_is_pointwise_smallest(h, w):
    m = combine_semantic(h, w, "Min")
    assert all(m <= combine_semantic(h, w, v) + 1e-15 for v in ("Avg", "Hum", "WM"))


def test_normalize_group_examples():
    assert np.allclose(normalize_group([1, -1]), [0.999999000001, -0.999999000001], atol=1e-12)
    assert np.array_equal(normalize_group([0.3, 0.3, 0.3]), [0.0, 0.0, 0.0])
    assert np.allclose(normalize_group([2, 0, -2]), [1.2247441213920483, 0.0, -1.2247441213920483], atol=1e-12)
    with pytest.raises(ValueError):
        normalize_group([1.0])


@settings(max_examples=200)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=16), st.floats(-5, 5))
def test_normalize_group_zero_mean_and_shift_invariant(A, shift):
    a = normalize_group(A)
    assert abs(a.mean()) <= 1e-9
    assert np.allclose(normalize_group(np.array(A) + shift), a, atol=1e-6)
