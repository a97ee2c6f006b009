"""Surrogate log-likelihood-ratio token rewards, semantic rewards and group
normalisation for capacity-aware GRPO."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from capspoof.toylm import ToyLM, make_rewrite_prompt, prompt_ids_for, token_logprobs

WEIGHTINGS = ("capacity", "uniform", "pmax")
SEMANTIC_VARIANTS = ("Min", "Avg", "Hum", "WM")
SIGMOID_THRESHOLD = 0.85
SIGMOID_CONFIDENCE = 0.975
ADV_EPS = 1e-6


def token_reward(c: float, logp_wm: float, logp_h: float) -> float:
    return c * (logp_wm - logp_h)


def position_weights(h_rows: np.ndarray, weighting: str = "capacity") -> np.ndarray:
    """Per-position reward weight from human-conditioned rows ``(..., V)`` of probabilities.

    ``capacity`` is ``1 - max p``; ``pmax`` is its reverse; ``uniform`` is 1.
    """
    pmax = h_rows.max(axis=-1)
    if weighting == "capacity":
        return 1.0 - pmax
    if weighting == "pmax":
        return pmax
    if weighting == "uniform":
        return np.ones_like(pmax)
    raise ValueError(f"unknown weighting {weighting!r}")


@dataclass(frozen=True)
class SurrogatePair:
    """Reference model conditioned on the human text and on its watermarked rewrite."""

    human: tuple[int, ...]
    wm: tuple[int, ...]
    ref_lm: ToyLM

    @property
    def human_ctx(self) -> int:
        return make_rewrite_prompt(self.human)

    @property
    def wm_ctx(self) -> int:
        return make_rewrite_prompt(self.wm)


@dataclass
class RewardBreakdown:
    c: np.ndarray
    llr: np.ndarray
    r: np.ndarray
    sem_human: float = float("nan")
    sem_wm: float = float("nan")
    A: float = float("nan")
    A_hat: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {"sem_human": self.sem_human, "sem_wm": self.sem_wm, "A": self.A, "A_hat": self.A_hat,
               "mean_r": float(np.mean(self.r)), "mean_c": float(np.mean(self.c)),
               "c": self.c.tolist(), "llr": self.llr.tolist(), "r": self.r.tolist()}
        rec.update(self.extra)
        return json.dumps(rec)


def surrogate_token_rewards(ref_lm: ToyLM, rollouts: np.ndarray, human: np.ndarray, wm: np.ndarray,
                            weighting: str = "capacity", h_logrows: np.ndarray | None = None,
                            human_pids=None, wm_pids=None):
    """Token rewards for ``n`` rollouts ``(n, T)`` against per-row sources ``human``/``wm``.

    ``h_logrows`` may pass in the human-conditioned reference log-prob rows
    already computed while sampling. Returns ``(c, llr, r)`` each ``(n, T)``.
    """
    rollouts = np.atleast_2d(rollouts)
    if rollouts.shape[1] == 0:
        raise ValueError("empty rollout")
    human = np.atleast_2d(human)
    wm = np.atleast_2d(wm)
    human_pids = prompt_ids_for(human) if human_pids is None else human_pids
    wm_pids = prompt_ids_for(wm) if wm_pids is None else wm_pids
    if h_logrows is None:
        h_logrows = token_logprobs(ref_lm, rollouts, human_pids, human, full=True)
    logp_h = np.take_along_axis(h_logrows, rollouts[:, :, None], axis=2)[:, :, 0]
    logp_wm = token_logprobs(ref_lm, rollouts, wm_pids, wm)
    c = position_weights(np.exp(h_logrows), weighting)
    llr = logp_wm - logp_h
    return c, llr, c * llr


def rollout_token_rewards(pair: SurrogatePair, rollout: Sequence[int], weighting: str = "capacity") -> RewardBreakdown:
    x = np.asarray(rollout, dtype=np.int64)[None, :]
    human = np.asarray(pair.human)[None, :]
    wm = np.asarray(pair.wm)[None, :]
    c, llr, r = surrogate_token_rewards(pair.ref_lm, x, human, wm, weighting,
                                        human_pids=np.array([pair.human_ctx], dtype=np.uint64),
                                        wm_pids=np.array([pair.wm_ctx], dtype=np.uint64))
    return RewardBreakdown(c[0], llr[0], r[0])


# -- semantic similarity ----------------------------------------------------------


class SimilarityScorer(Protocol):
    def __call__(self, a: Sequence[int], b: Sequence[int]) -> float: ...


def _bigrams(seq: Sequence[int]) -> Counter:
    s = [int(t) for t in seq]
    return Counter(zip(s[:-1], s[1:]))


class BigramCosine:
    """Cosine similarity of bigram count vectors (bigrams hashed as tuples)."""

    def __call__(self, a: Sequence[int], b: Sequence[int]) -> float:
        if len(a) == 0 or len(b) == 0:
            raise ValueError("empty sequence")
        ca, cb = _bigrams(a), _bigrams(b)
        if not ca or not cb:
            return 1.0 if list(a) == list(b) else 0.0
        # integer sums keep score(a, a) exactly 1
        dot = sum(v * cb[k] for k, v in ca.items())
        na2 = sum(v * v for v in ca.values())
        nb2 = sum(v * v for v in cb.values())
        return min(1.0, dot / math.sqrt(na2 * nb2))

    def batch(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Row-wise scores for equal-length integer arrays; same values as ``__call__``."""
        A = np.atleast_2d(A).astype(np.int64)
        B = np.atleast_2d(B).astype(np.int64)
        if A.shape[1] < 2 or B.shape[1] < 2:
            return np.array([self(a, b) for a, b in zip(A, B)])
        base = int(max(A.max(), B.max())) + 1
        n = A.shape[0]
        nb = base * base

        def counts(S):
            codes = S[:, :-1] * base + S[:, 1:] + np.arange(n)[:, None] * nb
            return np.bincount(codes.ravel(), minlength=n * nb).reshape(n, nb).astype(float)

        ca, cb = counts(A), counts(B)
        dot = np.einsum("ij,ij->i", ca, cb)
        den = np.sqrt(np.einsum("ij,ij->i", ca, ca) * np.einsum("ij,ij->i", cb, cb))
        return np.minimum(1.0, dot / den)


class TokenJaccard:
    """Jaccard overlap of token sets; an alternate drop-in scorer."""

    def __call__(self, a: Sequence[int], b: Sequence[int]) -> float:
        if len(a) == 0 or len(b) == 0:
            raise ValueError("empty sequence")
        sa, sb = set(map(int, a)), set(map(int, b))
        return len(sa & sb) / len(sa | sb)


def semantic_score(scorer: SimilarityScorer, a: Sequence[int], b: Sequence[int]) -> float:
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sequence")
    return float(scorer(a, b))


def batch_scores(scorer: SimilarityScorer, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if hasattr(scorer, "batch"):
        return scorer.batch(A, B)
    return np.array([scorer(a, b) for a, b in zip(A, B)])


def sigmoid_reward(s, threshold: float = SIGMOID_THRESHOLD, confidence: float = SIGMOID_CONFIDENCE):
    """Map a similarity in [0, 1] to (-1, 1); ``threshold`` maps to 0 and 1.0 to ``2*confidence - 1``."""
    x = math.log(confidence / (1.0 - confidence)) * (np.asarray(s, dtype=float) - threshold) / (1.0 - threshold)
    out = 2.0 / (1.0 + np.exp(-x)) - 1.0
    return float(out) if np.ndim(out) == 0 else out


def combine_semantic(s_human, s_wm, variant: str = "Min"):
    if variant == "Min":
        return np.minimum(s_human, s_wm)
    if variant == "Avg":
        return 0.5 * (np.asarray(s_human) + np.asarray(s_wm))
    if variant == "Hum":
        return s_human
    if variant == "WM":
        return s_wm
    raise ValueError(f"unknown semantic variant {variant!r}")


def normalize_group(A: Sequence[float], eps: float = ADV_EPS) -> np.ndarray:
    """``(A - mean) / (population std + eps)`` within one group."""
    A = np.asarray(A, dtype=float)
    if A.shape[-1] < 2:
        raise ValueError("group size must be >= 2")
    mean = A.mean(axis=-1, keepdims=True)
    return (A - mean) / (A.std(axis=-1, keepdims=True) + eps)
