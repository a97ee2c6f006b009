"""Tabular softmax policy trained with the capacity-aware GRPO objective.

The policy adds a learned logit offset, looked up by the trailing ``order``
tokens, to the reference model's log-probabilities. A zero row therefore
reproduces the reference exactly, and what is learned about a window
transfers to every prompt that produces that window.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax

from capspoof.reward import (SEMANTIC_VARIANTS, WEIGHTINGS, BigramCosine, SimilarityScorer,
                             batch_scores, combine_semantic, normalize_group, sigmoid_reward,
                             surrogate_token_rewards)
from capspoof.toylm import (BOS, ContextKey, Generation, ToyLM, context_windows, generate,
                            prompt_ids_for, token_logprobs)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GRPOConfig:
    G: int = 12
    batch: int = 48
    w1: float = 3.0
    w2: float = 2.0
    w3: float = 1.0
    beta: float = 0.04
    lr: float = 2e-4
    epochs: int = 10
    schedule: str = "cosine"
    clip: float | None = None
    weighting: str = "capacity"
    semantic: str = "Min"
    seed: int = 42

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if min(self.w1, self.w2, self.w3) < 0 or self.beta < 0:
            raise ValueError("weights and beta must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.semantic not in SEMANTIC_VARIANTS:
            raise ValueError(f"unknown semantic variant {self.semantic!r}")

    def to_config(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_config(cls, cfg: dict) -> "GRPOConfig":
        unknown = set(cfg) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown grpo keys: {sorted(unknown)}")
        return cls(**cfg)


class TabularPolicy:
    def __init__(self, ref: ToyLM, order: int = 1, table: np.ndarray | None = None):
        self.ref = ref
        self.order = order
        n_rows = (ref.vocab_size + 1) ** order
        if table is None:
            table = np.zeros((n_rows, ref.vocab_size))
        if table.shape != (n_rows, ref.vocab_size):
            raise ValueError("table shape does not match the reference vocabulary")
        self.table = table

    @property
    def vocab_size(self) -> int:
        return self.ref.vocab_size

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.ref, self.order, self.table.copy())

    def row_index(self, windows: np.ndarray) -> np.ndarray:
        """Table row for each ``(..., order)`` window (``BOS`` padded)."""
        windows = np.asarray(windows, dtype=np.int64)
        idx = np.zeros(windows.shape[:-1], dtype=np.int64)
        for j in range(self.order):
            idx = idx * (self.vocab_size + 1) + windows[..., j] + 1
        return idx

    def history_rows(self, tokens: np.ndarray) -> np.ndarray:
        """Row index for every position of ``tokens`` ``(n, T)``."""
        return self.row_index(context_windows(tokens, self.order))

    def logprobs(self, ref_logrows: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return log_softmax(ref_logrows + self.table[rows], axis=-1)

    def adjust(self) -> Callable:
        V = self.vocab_size

        def adjust(tokens, t, base):
            if self.order == 0:
                rows = np.zeros(tokens.shape[0], dtype=np.int64)
            else:
                tail = tokens[:, max(0, t - self.order):t]
                pad = np.full((tokens.shape[0], self.order - tail.shape[1]), BOS, dtype=np.int64)
                rows = self.row_index(np.concatenate([pad, tail], axis=1))
            return base + self.table[rows]
        return adjust

    def touched_rows(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.table != 0, axis=1))

    def to_checkpoint(self, config: dict | None = None) -> dict:
        rows = self.touched_rows()
        return {"config": config or {}, "lm": self.ref.to_config(), "order": self.order,
                "rows": {str(int(r)): self.table[r].tolist() for r in rows}}

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "TabularPolicy":
        pol = cls(ToyLM.from_config(ckpt["lm"]), int(ckpt["order"]))
        for r, vals in ckpt["rows"].items():
            pol.table[int(r)] = np.asarray(vals, dtype=float)
        return pol

    def save(self, path, config: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(config), fh)

    @classmethod
    def load(cls, path) -> "TabularPolicy":
        with open(path) as fh:
            return cls.from_checkpoint(json.load(fh))


def policy_dist(policy: TabularPolicy, ctx: ContextKey) -> np.ndarray:
    ref_row = np.log(policy.ref.next_dist(ctx))
    w = tuple(ctx.window)[-policy.order:] if policy.order else ()
    w = (BOS,) * (policy.order - len(w)) + tuple(w)
    p = np.exp(log_softmax(ref_row + policy.table[policy.row_index(np.array(w))]))
    return p / p.sum()


# -- rollouts -------------------------------------------------------------------


@dataclass
class RolloutBatch:
    tokens: np.ndarray  # (N, T) sampled tokens, N = B * G
    old_logprobs: np.ndarray  # (N, T) log pi_old of each sampled token
    ref_logrows: np.ndarray  # (N, T, V) reference log-probs, human-conditioned
    rows: np.ndarray  # (N, T) policy table rows
    prompt_ids: np.ndarray  # (N,)
    sources: np.ndarray  # (N, T) aligned source (human) text
    group: int

    @property
    def n_groups(self) -> int:
        return self.tokens.shape[0] // self.group


def rollout_batch(policy: TabularPolicy, sources: np.ndarray, G: int, rng: np.random.Generator,
                  length: int | None = None, sampler: str = "multinomial") -> RolloutBatch:
    """``G`` rollouts per source text, each conditioned on the rewrite context of its source."""
    if G < 2 and sampler == "multinomial":
        raise ValueError("G must be >= 2")
    sources = np.atleast_2d(np.asarray(sources, dtype=np.int64))
    length = sources.shape[1] if length is None else length
    src = np.repeat(sources, G, axis=0)
    pids = np.repeat(prompt_ids_for(sources), G)
    gen: Generation = generate(policy.ref, pids, length, rng, sources=src, sampler=sampler,
                               adjust=policy.adjust(), keep_rows=True)
    return RolloutBatch(gen.tokens, gen.logprobs, gen.base_rows, policy.history_rows(gen.tokens),
                        pids, src[:, :length], G)


def rollout_group(policy: TabularPolicy, source: Sequence[int], G: int, rng: np.random.Generator,
                  length: int | None = None) -> RolloutBatch:
    return rollout_batch(policy, np.asarray(source)[None, :], G, rng, length)


# -- objective --------------------------------------------------------------------


def scatter_rows(rows: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``vals`` ``(M, V)`` into a ``(n_rows, V)`` table at ``rows`` ``(M,)``."""
    out = np.zeros((n_rows, vals.shape[-1]))
    order = np.argsort(rows, kind="stable")
    rs = rows[order]
    starts = np.flatnonzero(np.r_[True, rs[1:] != rs[:-1]])
    out[rs[starts]] = np.add.reduceat(vals[order], starts, axis=0)
    return out


@dataclass
class ObjectiveParts:
    J: float
    surrogate: float
    kl: float
    grad: np.ndarray = field(repr=False)


def grpo_objective(policy: TabularPolicy, batch: RolloutBatch, adv: np.ndarray, token_r: np.ndarray,
                   cfg: GRPOConfig) -> ObjectiveParts:
    """Importance-weighted GRPO surrogate with exact per-token KL to the reference.

    ``adv`` holds the normalised sequence advantage per rollout ``(N,)`` and
    ``token_r`` the token rewards ``(N, T)``. Returns the value averaged
    per token, per rollout and per group, plus its gradient w.r.t. the table.
    """
    N, T = batch.tokens.shape
    if batch.old_logprobs.shape != (N, T) or token_r.shape != (N, T) or adv.shape != (N,):
        raise ValueError("rollouts, stored probabilities and rewards are misaligned")
    logpi = policy.logprobs(batch.ref_logrows, batch.rows)
    pi = np.exp(logpi)
    lp_tok = np.take_along_axis(logpi, batch.tokens[:, :, None], axis=2)[:, :, 0]
    ratio = np.exp(lp_tok - batch.old_logprobs)
    a = cfg.w1 * adv[:, None] + cfg.w2 * token_r
    diff = logpi - batch.ref_logrows
    kl = np.sum(pi * diff, axis=2)
    scale = 1.0 / (N * T)

    if cfg.clip is None:
        surr = ratio * a
        dsurr = ratio * a
    else:
        clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
        use_raw = ratio * a <= clipped * a
        surr = np.where(use_raw, ratio * a, clipped * a)
        dsurr = np.where(use_raw, ratio * a, 0.0)
    J = scale * float(np.sum(surr - cfg.beta * kl))

    # d(ratio)/dz = ratio (e_x - pi); d KL/dz = pi (log pi - log ref - KL)
    g = -dsurr[:, :, None] * pi
    np.put_along_axis(g, batch.tokens[:, :, None],
                      np.take_along_axis(g, batch.tokens[:, :, None], axis=2) + dsurr[:, :, None], axis=2)
    if cfg.beta:
        g -= cfg.beta * pi * (diff - kl[:, :, None])
    g *= scale
    grad = scatter_rows(batch.rows.reshape(-1), g.reshape(N * T, -1), policy.table.shape[0])
    return ObjectiveParts(J, scale * float(np.sum(surr)), float(kl.mean()), grad)


def ce_anchor(policy: TabularPolicy, pairs) -> tuple[float, np.ndarray]:
    """Teacher-forced cross-entropy of the watermarked rewrites given their sources.

    ``pairs`` is ``(human, wm)`` with two ``(n, T)`` arrays. Returns the
    per-token mean loss and its gradient w.r.t. the table.
    """
    human, wm = (np.atleast_2d(np.asarray(p, dtype=np.int64)) for p in pairs)
    if human.size == 0 or wm.size == 0:
        raise ValueError("no pairs")
    n, T = wm.shape
    ref_rows = token_logprobs(policy.ref, wm, prompt_ids_for(human), human, full=True)
    rows = policy.history_rows(wm)
    logpi = policy.logprobs(ref_rows, rows)
    lp_tok = np.take_along_axis(logpi, wm[:, :, None], axis=2)[:, :, 0]
    M = n * T
    loss = -float(lp_tok.sum()) / M
    g = np.exp(logpi)
    np.put_along_axis(g, wm[:, :, None], np.take_along_axis(g, wm[:, :, None], axis=2) - 1.0, axis=2)
    grad = scatter_rows(rows.reshape(-1), g.reshape(M, -1) / M, policy.table.shape[0])
    return loss, grad


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray, eps: float = 1e-5,
               entries: np.ndarray | None = None, floor: float = 1e-6) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(params)`` returns ``(value, grad)``; only ``entries`` (flat indices,
    default: every nonzero gradient entry) are compared.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    params = np.array(params, dtype=float)
    _, grad = fn(params)
    flat = params.reshape(-1)
    if entries is None:
        entries = np.flatnonzero(grad.reshape(-1))
    worst = 0.0
    for i in entries:
        old = flat[i]
        flat[i] = old + eps
        fp, _ = fn(params)
        flat[i] = old - eps
        fm, _ = fn(params)
        flat[i] = old
        num = (fp - fm) / (2 * eps)
        ana = grad.reshape(-1)[i]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst


# -- training ----------------------------------------------------------------------


@dataclass
class PairBatch:
    human: np.ndarray  # (B, T)
    wm: np.ndarray  # (B, T)


def compute_rewards(policy: TabularPolicy, batch: RolloutBatch, pairs: PairBatch, cfg: GRPOConfig,
                    scorer: SimilarityScorer):
    """Token rewards, semantic scores and normalised advantages for a rollout batch."""
    G = batch.group
    wm_src = np.repeat(pairs.wm, G, axis=0)[:, :batch.tokens.shape[1]]
    c, llr, r = surrogate_token_rewards(policy.ref, batch.tokens, batch.sources, wm_src, cfg.weighting,
                                        h_logrows=batch.ref_logrows, human_pids=batch.prompt_ids,
                                        wm_pids=np.repeat(prompt_ids_for(pairs.wm), G))
    s_h = batch_scores(scorer, batch.tokens, batch.sources)
    s_wm = batch_scores(scorer, batch.tokens, wm_src)
    A = sigmoid_reward(combine_semantic(s_h, s_wm, cfg.semantic))
    A_hat = normalize_group(np.asarray(A).reshape(-1, G)).reshape(-1)
    return dict(c=c, llr=llr, r=r, s_h=s_h, s_wm=s_wm, A=np.asarray(A), A_hat=A_hat)


def lr_at(cfg: GRPOConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}) + "\n")


def train_step(policy: TabularPolicy, pairs: PairBatch, cfg: GRPOConfig, rng: np.random.Generator,
               lr: float, scorer: SimilarityScorer, reward_sink: list | None = None) -> dict:
    """One on-policy update: sample with pi_old = pi, score, ascend ``J - w3 * CE``."""
    batch = rollout_batch(policy, pairs.human, cfg.G, rng)
    rw = compute_rewards(policy, batch, pairs, cfg, scorer)
    parts = grpo_objective(policy, batch, rw["A_hat"], rw["r"], cfg)
    grad = parts.grad
    ce = float("nan")
    if cfg.w3 > 0:
        ce, ce_grad = ce_anchor(policy, (pairs.human, pairs.wm))
        grad = grad - cfg.w3 * ce_grad
    objective = parts.J - (cfg.w3 * ce if cfg.w3 > 0 else 0.0)
    if lr:
        policy.table += lr * grad
    if reward_sink is not None:
        reward_sink.append({k: rw[k] for k in ("c", "llr", "r")})
    return {"lr": lr, "objective": objective, "surrogate": parts.surrogate, "kl_to_ref": parts.kl,
            "ce_loss": ce, "mean_A": float(rw["A"].mean()), "mean_r": float(rw["r"].mean()),
            "mean_sem_human": float(rw["s_h"].mean()), "grad_norm": float(np.linalg.norm(grad))}


def train(policy: TabularPolicy, human: np.ndarray, wm: np.ndarray, cfg: GRPOConfig,
          evaluate: Callable[[TabularPolicy], dict] | None = None,
          scorer: SimilarityScorer | None = None, reward_sink: list | None = None,
          ) -> tuple[TabularPolicy, TrainingLog]:
    """Train a copy of ``policy`` on ``(human, wm)`` pairs; ``evaluate`` runs before epoch 1 and after each epoch."""
    human = np.atleast_2d(np.asarray(human, dtype=np.int64))
    wm = np.atleast_2d(np.asarray(wm, dtype=np.int64))
    if human.shape[0] < 1 or human.shape != wm.shape:
        raise ValueError("need at least one aligned (human, watermarked) pair")
    scorer = scorer or BigramCosine()
    policy = policy.copy()
    rng = np.random.default_rng(cfg.seed)
    n = human.shape[0]
    per_epoch = math.ceil(n / cfg.batch)
    total = per_epoch * cfg.epochs
    tlog = TrainingLog()
    if evaluate is not None:
        tlog.epochs.append({"epoch": 0, **evaluate(policy)})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            rec = train_step(policy, PairBatch(human[idx], wm[idx]), cfg, rng, lr_at(cfg, step, total),
                             scorer, reward_sink)
            tlog.steps.append({"step": step, "epoch": epoch, **rec})
            log.debug("step %d %s", step, rec)
            step += 1
        if evaluate is not None:
            tlog.epochs.append({"epoch": epoch, **evaluate(policy)})
    return policy, tlog
