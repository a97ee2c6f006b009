"""Seeded order-k autoregressive toy language model.

Next-token logits come from hashing ``(seed, prompt_id, trailing window, token)``
into a standard normal, scaled by ``concentration``. A *rewrite* context also
carries the source token aligned with the current position; the model adds
``copy_strength`` nats to that token, which makes conditioning on a text
behave like a noisy positional paraphrase of it.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, ndtri

from capspoof.hashing import fold_window, keyed_state, token_uniforms

BOS = -1
PROB_TOL = 1e-12


@dataclass(frozen=True)
class ContextKey:
    prompt_id: int
    window: tuple[int, ...] = ()
    source_token: int | None = None


@dataclass(frozen=True)
class ToyLM:
    vocab_size: int = 64
    order: int = 2
    seed: int = 0
    concentration: float = 1.0
    copy_strength: float = 6.0
    floor: float = 1e-8

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.concentration < 0:
            raise ValueError("concentration must be >= 0")
        if not 0 <= self.floor < 1.0 / self.vocab_size:
            raise ValueError("floor must lie in [0, 1/V)")

    # -- batched core -------------------------------------------------------

    def logits_batch(self, prompt_ids, windows, source_tokens=None) -> np.ndarray:
        """Logits for ``n`` contexts.

        ``windows`` has shape ``(n, order)`` with ``BOS`` padding on the left;
        ``source_tokens`` is ``(n,)`` with ``-1`` meaning "no source".
        """
        prompt_ids = np.asarray(prompt_ids)
        n = prompt_ids.shape[0]
        windows = np.asarray(windows, dtype=np.int64).reshape(n, self.order)
        state = fold_window(keyed_state(self.seed, n, prompt_ids), windows)
        z = ndtri(token_uniforms(state, self.vocab_size)) * self.concentration
        if source_tokens is not None:
            src = np.asarray(source_tokens, dtype=np.int64)
            rows = np.flatnonzero(src >= 0)
            z[rows, src[rows]] += self.copy_strength
        return z

    def logprobs_batch(self, prompt_ids, windows, source_tokens=None) -> np.ndarray:
        logp = log_softmax(self.logits_batch(prompt_ids, windows, source_tokens), axis=1)
        if self.floor > 0:
            p = np.maximum(np.exp(logp), self.floor)
            p /= p.sum(axis=1, keepdims=True)
            with np.errstate(divide="ignore"):
                logp = np.log(p)
        return logp

    def probs_batch(self, prompt_ids, windows, source_tokens=None) -> np.ndarray:
        p = np.exp(self.logprobs_batch(prompt_ids, windows, source_tokens))
        return p / p.sum(axis=1, keepdims=True)

    # -- single-context API -------------------------------------------------

    def pad_window(self, window: Sequence[int]) -> tuple[int, ...]:
        w = tuple(int(t) for t in window)[-self.order:] if self.order else ()
        return (BOS,) * (self.order - len(w)) + w

    def next_dist(self, ctx: ContextKey) -> np.ndarray:
        src = None if ctx.source_token is None else [ctx.source_token]
        p = self.probs_batch(np.array([ctx.prompt_id], dtype=np.uint64),
                             np.array([self.pad_window(ctx.window)]), src)[0]
        check_probvec(p)
        return p

    def to_config(self) -> dict:
        return asdict(self)

    @classmethod
    def from_config(cls, cfg: dict) -> "ToyLM":
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown lm keys: {sorted(unknown)}")
        return cls(**cfg)


def check_probvec(p: np.ndarray, tol: float = PROB_TOL) -> None:
    if p.min() < 0 or abs(p.sum() - 1.0) > tol:
        raise ValueError("not a probability vector")


def context_windows(tokens: np.ndarray, order: int) -> np.ndarray:
    """Trailing windows for every position: ``(n, T) -> (n, T, order)``.

    Position ``t`` sees ``tokens[:, t-order:t]`` left-padded with ``BOS``.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    n, T = tokens.shape
    if order == 0:
        return np.zeros((n, T, 0), dtype=np.int64)
    padded = np.concatenate([np.full((n, order), BOS, dtype=np.int64), tokens], axis=1)
    return np.lib.stride_tricks.sliding_window_view(padded, order, axis=1)[:, :T, :]


def make_rewrite_prompt(seq: Sequence[int]) -> int:
    """Deterministic 64-bit digest identifying the rewrite request for ``seq``."""
    arr = np.asarray(seq, dtype="<i8")
    if arr.size == 0:
        raise ValueError("empty sequence")
    return int.from_bytes(hashlib.blake2b(arr.tobytes(), digest_size=8).digest(), "little")


def prompt_ids_for(seqs: np.ndarray) -> np.ndarray:
    return np.array([make_rewrite_prompt(s) for s in np.atleast_2d(seqs)], dtype=np.uint64)


@dataclass
class Generation:
    tokens: np.ndarray  # (n, T)
    logprobs: np.ndarray  # (n, T) log-prob of each token under the sampling law
    base_logprobs: np.ndarray  # (n, T) log-prob under the unmodified LM
    base_rows: np.ndarray | None = field(default=None, repr=False)  # (n, T, V)


# adjust(tokens_so_far, t, base_logp) -> scores; the sampler then draws from
# softmax(scores) or takes their argmax.
Adjust = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def generate(lm: ToyLM, prompt_ids, length: int, rng: np.random.Generator | None = None, *,
             sources: np.ndarray | None = None, sampler: str = "multinomial",
             adjust: Adjust | None = None, keep_rows: bool = False) -> Generation:
    """Batched autoregressive generation for ``len(prompt_ids)`` sequences."""
    if length < 1:
        raise ValueError("empty generation")
    if sampler not in ("multinomial", "greedy"):
        raise ValueError(f"unknown sampler {sampler!r}")
    if sampler == "multinomial" and rng is None:
        raise ValueError("multinomial sampling needs an rng")
    prompt_ids = np.asarray(prompt_ids, dtype=np.uint64)
    n = prompt_ids.shape[0]
    if sources is not None:
        sources = np.asarray(sources, dtype=np.int64)
        if sources.shape[0] != n or sources.shape[1] < length:
            raise ValueError("sources must cover every generated position")
    tokens = np.zeros((n, length), dtype=np.int64)
    logprobs = np.zeros((n, length))
    base_lp = np.zeros((n, length))
    rows = np.zeros((n, length, lm.vocab_size)) if keep_rows else None
    idx = np.arange(n)
    window = np.full((n, lm.order), BOS, dtype=np.int64)
    for t in range(length):
        base = lm.logprobs_batch(prompt_ids, window, None if sources is None else sources[:, t])
        scores = base if adjust is None else adjust(tokens[:, :t], t, base)
        law = log_softmax(scores, axis=1)
        if sampler == "greedy":
            x = np.argmax(scores, axis=1)
        else:
            x = sample_rows(np.exp(law), rng)
        tokens[:, t] = x
        logprobs[:, t] = law[idx, x]
        base_lp[:, t] = base[idx, x]
        if keep_rows:
            rows[:, t] = base
        if lm.order:
            window = np.concatenate([window[:, 1:], x[:, None]], axis=1)
    return Generation(tokens, logprobs, base_lp, rows)


def sample_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    cum = np.cumsum(p, axis=1)
    u = rng.random((p.shape[0], 1)) * cum[:, -1:]
    return np.minimum((cum <= u).sum(axis=1), p.shape[1] - 1)


def sample_sequence(lm: ToyLM, prompt_id: int, length: int, rng_seed: int,
                    sampler: str = "multinomial", source: Sequence[int] | None = None) -> Generation:
    rng = np.random.default_rng(rng_seed)
    src = None if source is None else np.asarray(source, dtype=np.int64)[None, :]
    g = generate(lm, np.array([prompt_id], dtype=np.uint64), length, rng, sources=src, sampler=sampler)
    return Generation(g.tokens[0], g.logprobs[0], g.base_logprobs[0])


def token_logprobs(lm: ToyLM, seqs: np.ndarray, prompt_ids, sources: np.ndarray | None = None,
                   full: bool = False) -> np.ndarray:
    """Teacher-forced log-probs of ``seqs`` ``(n, T)``; with ``full`` return all rows ``(n, T, V)``."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    n, T = seqs.shape
    win = context_windows(seqs, lm.order).reshape(n * T, lm.order)
    pids = np.repeat(np.asarray(prompt_ids, dtype=np.uint64).reshape(n), T)
    src = None if sources is None else np.asarray(sources, dtype=np.int64)[:, :T].reshape(n * T)
    rows = lm.logprobs_batch(pids, win, src).reshape(n, T, lm.vocab_size)
    if full:
        return rows
    return np.take_along_axis(rows, seqs[:, :, None], axis=2)[:, :, 0]


def sequence_nll(lm: ToyLM, seq: Sequence[int], prompt_id: int, source: Sequence[int] | None = None) -> float:
    """Mean negative log-likelihood in nats/token; perplexity is ``exp`` of this."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    src = None if source is None else np.asarray(source)[None, :]
    lp = token_logprobs(lm, seq[None, :], [prompt_id], src)[0]
    return float(-lp.mean())


def perplexity(lm: ToyLM, seq: Sequence[int], prompt_id: int) -> float:
    return float(np.exp(sequence_nll(lm, seq, prompt_id)))


def shannon_entropy(dist: np.ndarray) -> np.ndarray:
    """Entropy in nats of one distribution or of each row."""
    p = np.asarray(dist, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def write_sequences(path, seqs) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(" ".join(str(int(t)) for t in s) + "\n")


def read_sequences(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[int(t) for t in line.split()] for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"no sequences in {path}")
    if len({len(r) for r in rows}) != 1:
        return np.array(rows, dtype=object)
    return np.array(rows, dtype=np.int64)
