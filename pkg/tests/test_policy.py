import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capspoof.policy import (GRPOConfig, RolloutBatch, TabularPolicy, TrainingLog, ce_anchor, grad_check,
                             grpo_objective, lr_at, policy_dist, rollout_batch, rollout_group, train)
from capspoof.toylm import ContextKey, ToyLM, token_logprobs


def small_instance(seed, order=1, G=3, B=2, T=4, perturb=0.5):
    rng = np.random.default_rng(seed)
    lm = ToyLM(vocab_size=8, order=2, seed=seed)
    pol = TabularPolicy(lm, order)
    pol.table += perturb * rng.standard_normal(pol.table.shape)
    sources = rng.integers(0, 8, (B, T))
    batch = rollout_batch(pol, sources, G, rng)
    adv = rng.standard_normal(B * G)
    r = rng.standard_normal((B * G, T))
    return pol, batch, adv, r, rng


def objective_fn(pol, batch, adv, r, cfg):
    def fn(params):
        p = TabularPolicy(pol.ref, pol.order, params.reshape(pol.table.shape))
        parts = grpo_objective(p, batch, adv, r, cfg)
        return parts.J, parts.grad
    return fn


def test_config_defaults_and_validation():
    cfg = GRPOConfig()
    assert (cfg.G, cfg.batch, cfg.w1, cfg.w2, cfg.w3, cfg.beta, cfg.lr, cfg.epochs) == (12, 48, 3, 2, 1, 0.04, 2e-4, 10)
    assert cfg.schedule == "cosine" and cfg.clip is None
    assert GRPOConfig.from_config(cfg.to_config()) == cfg
    for bad in (dict(G=1), dict(w1=-1), dict(beta=-0.1), dict(weighting="x"), dict(semantic="x")):
        with pytest.raises(ValueError):
            GRPOConfig(**bad)
    with pytest.raises(ValueError):
        GRPOConfig.from_config({"bogus": 1})


def test_fresh_policy_is_reference():
    lm = ToyLM()
    pol = TabularPolicy(lm, 1)
    for ctx in (ContextKey(1, (3, 4)), ContextKey(2, ()), ContextKey(5, (9,), 7)):
        assert np.allclose(policy_dist(pol, ctx), lm.next_dist(ctx), atol=1e-15)


def test_policy_dist_shift_and_odds():
    lm = ToyLM()
    pol = TabularPolicy(lm, 1)
    ctx = ContextKey(1, (3, 4))
    row = pol.row_index(np.array([4]))
    base = policy_dist(pol, ctx)
    pol.table[row] += 2.5
    assert np.allclose(policy_dist(pol, ctx), base, atol=1e-15)
    pol.table[row, 5] += 1.3
    p = policy_dist(pol, ctx)
    odds = (p[5] / (1 - p[5])) / (base[5] / (1 - base[5]))
    # raising one logit multiplies its odds against every other token by e^delta
    assert p[5] / p[0] == pytest.approx(math.exp(1.3) * base[5] / base[0], rel=1e-12)
    assert odds > 1


def test_rollout_group_replay_and_determinism():
    lm = ToyLM(vocab_size=16)
    pol = TabularPolicy(lm, 1)
    pol.table += np.random.default_rng(0).standard_normal(pol.table.shape)
    src = np.arange(10) % 16
    a = rollout_group(pol, src, 2, np.random.default_rng(7))
    b = rollout_group(pol, src, 2, np.random.default_rng(7))
    assert np.array_equal(a.tokens, b.tokens) and a.tokens.shape == (2, 10)
    relp = pol.logprobs(token_logprobs(lm, a.tokens, a.prompt_ids, a.sources, full=True), a.rows)
    replay = np.take_along_axis(relp, a.tokens[:, :, None], axis=2)[:, :, 0]
    assert np.max(np.abs(replay - a.old_logprobs)) < 1e-12
    with pytest.raises(ValueError):
        rollout_group(pol, src, 1, np.random.default_rng(0))


def test_zero_weights_give_zero_objective():
    pol, batch, adv, r, _ = small_instance(0)
    cfg = GRPOConfig(w1=0, w2=0, w3=0, beta=0)
    parts = grpo_objective(pol, batch, np.zeros_like(adv), np.zeros_like(r), cfg)
    assert parts.J == 0 and not parts.grad.any()


def test_kl_zero_at_reference():
    pol, batch, adv, r, _ = small_instance(1, perturb=0.0)
    assert grpo_objective(pol, batch, adv, r, GRPOConfig()).kl == pytest.approx(0.0, abs=1e-15)


def test_misaligned_inputs_rejected():
    pol, batch, adv, r, _ = small_instance(2)
    with pytest.raises(ValueError):
        grpo_objective(pol, batch, adv, r[:, :-1], GRPOConfig())


@pytest.mark.parametrize("clip", [None, 0.2])
@pytest.mark.parametrize("order", [1, 2])
def test_grpo_gradient_finite_differences(clip, order):
    for seed in range(5):
        pol, batch, adv, r, _ = small_instance(seed, order=order)
        # sample from a different snapshot so ratios differ from 1
        pol.table += 0.3 * np.random.default_rng(seed + 100).standard_normal(pol.table.shape)
        cfg = GRPOConfig(clip=clip, beta=0.3)
        err = grad_check(objective_fn(pol, batch, adv, r, cfg), pol.table.copy())
        assert err < 1e-4


def test_ce_anchor_examples_and_gradient():
    lm = ToyLM(vocab_size=8, concentration=0.0, copy_strength=0.0, floor=0.0)
    pol = TabularPolicy(lm, 1)
    rng = np.random.default_rng(0)
    human, wm = rng.integers(0, 8, (3, 4)), rng.integers(0, 8, (3, 4))
    loss, _ = ce_anchor(pol, (human, wm))
    assert loss == pytest.approx(math.log(8), abs=1e-12)

    pol.table += rng.standard_normal(pol.table.shape)

    def fn(params):
        return ce_anchor(TabularPolicy(lm, 1, params.reshape(pol.table.shape)), (human, wm))
    assert grad_check(fn, pol.table.copy()) < 1e-4


def test_ce_anchor_point_mass_target():
    # order-0 policy on a uniform model with a huge logit on the target token
    lm = ToyLM(vocab_size=4, order=0, concentration=0.0, copy_strength=0.0, floor=0.0)
    pol = TabularPolicy(lm, 0)
    pol.table[0, 2] = 800.0
    loss, grad = ce_anchor(pol, (np.array([[1, 1, 1]]), np.array([[2, 2, 2]])))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


def test_grad_check_on_quadratic():
    A = np.diag([1.0, 2.0, 3.0])

    def fn(x):
        return float(x @ A @ x), 2 * A @ x
    assert grad_check(fn, np.array([0.3, -1.2, 2.0])) < 1e-8
    with pytest.raises(ValueError):
        grad_check(fn, np.zeros(3), eps=0)


def test_reference_is_stationary_for_pure_kl():
    pol, batch, adv, r, _ = small_instance(3, perturb=0.0)
    parts = grpo_objective(pol, batch, adv, r, GRPOConfig(w1=0, w2=0, w3=0, beta=0.5))
    assert np.linalg.norm(parts.grad) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_kl_non_negative(seed):
    pol, batch, adv, r, _ = small_instance(seed)
    assert grpo_objective(pol, batch, adv, r, GRPOConfig()).kl >= 0


def test_objective_linear_in_w2():
    pol, batch, adv, r, _ = small_instance(4)
    base = GRPOConfig(w1=1.0, w2=1.0, beta=0.1)
    J1 = grpo_objective(pol, batch, adv, r, base).J
    J2 = grpo_objective(pol, batch, adv, r, dataclasses.replace(base, w2=2.0)).J
    J0 = grpo_objective(pol, batch, adv, r, dataclasses.replace(base, w2=0.0)).J
    assert J2 - J1 == pytest.approx(J1 - J0, rel=1e-10)


def test_lr_schedule():
    cfg = GRPOConfig(lr=1.0)
    assert lr_at(cfg, 0, 10) == 1.0
    assert lr_at(cfg, 5, 10) == pytest.approx(0.5)
    assert lr_at(dataclasses.replace(cfg, schedule="constant"), 7, 10) == 1.0


def tiny_pairs(seed=0, n=6, T=12):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 16, (n, T)), rng.integers(0, 16, (n, T))


def test_train_lr_zero_is_identity():
    lm = ToyLM(vocab_size=16)
    pol = TabularPolicy(lm, 1)
    human, wm = tiny_pairs()
    out, log = train(pol, human, wm, GRPOConfig(lr=0.0, G=2, batch=4, epochs=2))
    assert np.array_equal(out.table, pol.table)
    assert len(log.steps) == 4


def test_train_pure_kl_stays_at_reference():
    lm = ToyLM(vocab_size=16)
    human, wm = tiny_pairs(1)
    out, _ = train(TabularPolicy(lm, 1), human, wm, GRPOConfig(w1=0, w2=0, w3=0, beta=0.04, lr=10.0, G=2,
                                                               batch=3, epochs=2))
    assert np.abs(out.table).max() < 1e-10


def test_train_reproducible_and_logged(tmp_path):
    lm = ToyLM(vocab_size=16)
    human, wm = tiny_pairs(2)
    cfg = GRPOConfig(lr=5.0, G=3, batch=4, epochs=2, seed=9)
    evals = []
    a, log_a = train(TabularPolicy(lm, 1), human, wm, cfg, evaluate=lambda p: evals.append(1) or {"x": 1.0})
    b, log_b = train(TabularPolicy(lm, 1), human, wm, cfg)
    assert np.array_equal(a.table, b.table)
    assert len(evals) == 3 and len(log_a.epochs) == 3
    assert {"objective", "mean_A", "mean_r", "kl_to_ref", "ce_loss"} <= set(log_a.steps[0])
    log_a.write_jsonl(tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["kind"] == "step" and len(lines) == len(log_a.steps) + 3
    with pytest.raises(ValueError):
        train(TabularPolicy(lm, 1), human[:0], wm[:0], cfg)


def test_checkpoint_roundtrip(tmp_path):
    lm = ToyLM(vocab_size=16, seed=3)
    pol = TabularPolicy(lm, 1)
    pol.table[[2, 5]] = np.random.default_rng(0).standard_normal((2, 16))
    pol.save(tmp_path / "ckpt.json", {"lr": 1})
    back = TabularPolicy.load(tmp_path / "ckpt.json")
    assert back.ref == lm and np.array_equal(back.table, pol.table)
    assert set(json.loads((tmp_path / "ckpt.json").read_text())["rows"]) == {"2", "5"}


def test_training_log_append_only():
    log = TrainingLog()
    log.steps.append({"step": 0})
    assert log.steps == [{"step": 0}] and log.epochs == []
