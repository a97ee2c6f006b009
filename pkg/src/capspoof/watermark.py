"""Keyed watermark generation and detection: KGW, Unigram, SWEET, EWD and a
keyed Gumbel-max sampling scheme standing in for the PF family."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import gammaincc, log_softmax

from capspoof.hashing import fold_window, keyed_state, token_uniform_at, token_uniforms
from capspoof.toylm import (BOS, ContextKey, Generation, ToyLM, context_windows, generate,
                            shannon_entropy, token_logprobs)

LOGIT_SCHEMES = ("KGW", "Unigram", "SWEET", "EWD")
SAMPLING_SCHEMES = ("PF",)
DETECTOR_PROMPT = 0

# Field names mirror the MarkLLM-style configs for each algorithm.
DEFAULTS: dict[str, dict] = {
    "KGW": dict(gamma=0.5, delta=3.0, hash_key=15485863, prefix_length=1, z_threshold=4.0),
    "EWD": dict(gamma=0.5, delta=2.0, hash_key=15485863, prefix_length=1, z_threshold=4.0),
    "SWEET": dict(gamma=0.5, delta=2.0, hash_key=15485863, prefix_length=1, z_threshold=4.0,
                  entropy_threshold=0.9),
    "Unigram": dict(gamma=0.5, delta=2.0, hash_key=15485863, z_threshold=4.0),
    "PF": dict(ngram=8, salt_key=35317),
}


@dataclass(frozen=True)
class GreenKey:
    hash_key: int = 15485863
    gamma: float = 0.5
    prefix_length: int = 1
    global_list: bool = False

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.prefix_length < 0:
            raise ValueError("prefix_length must be >= 0")

    @property
    def width(self) -> int:
        return 0 if self.global_list else self.prefix_length


@dataclass(frozen=True)
class SamplingKey:
    salt_key: int = 35317
    ngram: int = 8

    def __post_init__(self):
        if self.ngram < 1:
            raise ValueError("ngram must be >= 1")


@dataclass(frozen=True)
class Detection:
    statistic: float
    pvalue: float | None
    threshold: float
    flagged: bool
    n_effective: float
    scheme: str = ""

    def to_json(self) -> str:
        return json.dumps({"scheme": self.scheme, "statistic": self.statistic, "pvalue": self.pvalue,
                           "flagged": self.flagged, "n_effective": self.n_effective})


@dataclass(frozen=True)
class WatermarkScheme:
    algorithm_name: str = "KGW"
    gamma: float = 0.5
    delta: float = 3.0
    hash_key: int = 15485863
    prefix_length: int = 1
    z_threshold: float = 4.0
    entropy_threshold: float | None = None
    ngram: int = 8
    salt_key: int = 35317
    alpha: float = 1e-4

    def __post_init__(self):
        if self.algorithm_name not in LOGIT_SCHEMES + SAMPLING_SCHEMES:
            raise ValueError(f"unknown watermark scheme {self.algorithm_name!r}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def is_sampling(self) -> bool:
        return self.algorithm_name in SAMPLING_SCHEMES

    @property
    def green_key(self) -> GreenKey:
        return GreenKey(self.hash_key, self.gamma, self.prefix_length,
                        global_list=self.algorithm_name == "Unigram")

    @property
    def sampling_key(self) -> SamplingKey:
        return SamplingKey(self.salt_key, self.ngram)

    def to_config(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def make_scheme(name: str, **overrides) -> WatermarkScheme:
    """Build a scheme from its published defaults plus ``overrides``."""
    if name not in DEFAULTS:
        raise ValueError(f"unknown watermark scheme {name!r}")
    cfg = dict(DEFAULTS[name])
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(cfg) - set(WatermarkScheme.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown scheme keys: {sorted(unknown)}")
    return WatermarkScheme(algorithm_name=name, **cfg)


# -- green lists ----------------------------------------------------------------


def _green_state(key: GreenKey, prefixes: np.ndarray, prompt_salt: int) -> np.ndarray:
    n = prefixes.shape[0]
    if key.width == 0:
        return keyed_state(key.hash_key, n)
    short = (prefixes == BOS).any(axis=1)
    salt = np.where(short, np.uint64(int(prompt_salt) & 0xFFFFFFFFFFFFFFFF), np.uint64(0))
    return fold_window(keyed_state(key.hash_key, n, salt), prefixes)


def green_mask(key: GreenKey, prefixes: np.ndarray, vocab_size: int, prompt_salt: int = 0) -> np.ndarray:
    """Boolean ``(n, V)`` green membership for ``n`` prefixes of width ``key.width``."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    prefixes = prefixes.reshape(prefixes.shape[0] if prefixes.ndim > 1 else -1, key.width)
    return token_uniforms(_green_state(key, prefixes, prompt_salt), vocab_size) < key.gamma


def green_set(key: GreenKey, prefix: Sequence[int], vocab_size: int, prompt_salt: int = 0) -> frozenset[int]:
    tail = list(prefix)[-key.width:] if key.width else []
    window = [BOS] * (key.width - len(tail)) + [int(t) for t in tail]
    mask = green_mask(key, np.array([window]), vocab_size, prompt_salt)[0]
    return frozenset(np.flatnonzero(mask).tolist())


def green_hits(key: GreenKey, seqs: np.ndarray, prompt_salt: int = 0) -> np.ndarray:
    """Whether each token of ``seqs`` ``(n, T)`` is green under its own prefix."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    n, T = seqs.shape
    win = context_windows(seqs, key.width).reshape(n * T, key.width)
    u = token_uniform_at(_green_state(key, win, prompt_salt), seqs.reshape(-1))
    return (u < key.gamma).reshape(n, T)


def apply_logit_bias(dist: np.ndarray, green, delta: float) -> np.ndarray:
    """Reweight ``p_x`` by ``exp(delta)`` on green tokens and renormalise."""
    p = np.asarray(dist, dtype=float)
    mask = np.zeros(p.shape[-1], dtype=bool)
    mask[list(green)] = True
    out = p * np.where(mask, math.exp(delta), 1.0)
    return out / out.sum()


# -- generation -----------------------------------------------------------------


def _prefix(tokens: np.ndarray, width: int) -> np.ndarray:
    n, t = tokens.shape
    if width == 0:
        return np.zeros((n, 0), dtype=np.int64)
    pad = np.full((n, max(0, width - t)), BOS, dtype=np.int64)
    return np.concatenate([pad, tokens[:, max(0, t - width):]], axis=1)


def pf_uniforms(key: SamplingKey, windows: np.ndarray, vocab_size: int) -> np.ndarray:
    return keyed_pf_uniforms(key.salt_key, windows, vocab_size, key.ngram)


def keyed_pf_uniforms(salt_keys, windows: np.ndarray, vocab_size: int, ngram: int) -> np.ndarray:
    """Per-token uniforms ``(n, V)``; ``salt_keys`` is one key or one key per window."""
    windows = np.asarray(windows, dtype=np.int64).reshape(-1, ngram)
    return token_uniforms(fold_window(keyed_state(salt_keys, windows.shape[0]), windows), vocab_size)


def gumbel_scores(logp: np.ndarray, u: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return logp - np.log(-np.log(u))


def pf_sample(base: np.ndarray, key: SamplingKey, ctx_window: Sequence[int]) -> int:
    """Keyed Gumbel-max draw: deterministic given the key and trailing window."""
    w = np.array([_prefix(np.array([list(ctx_window)], dtype=np.int64), key.ngram)[0]])
    u = pf_uniforms(key, w, len(base))[0]
    with np.errstate(divide="ignore"):
        return int(np.argmax(gumbel_scores(np.log(np.asarray(base, dtype=float)), u)))


def watermark_adjust(scheme: WatermarkScheme, vocab_size: int, prompt_salt: int = 0):
    """Score transform for :func:`capspoof.toylm.generate` implementing the scheme."""
    name = scheme.algorithm_name
    if scheme.is_sampling:
        skey = scheme.sampling_key

        def adjust(tokens, t, base):
            return gumbel_scores(base, pf_uniforms(skey, _prefix(tokens, skey.ngram), vocab_size))
        return adjust

    gkey = scheme.green_key

    def adjust(tokens, t, base):
        mask = green_mask(gkey, _prefix(tokens, gkey.width), vocab_size, prompt_salt)
        if name == "SWEET":
            mask &= (shannon_entropy(np.exp(base)) > scheme.entropy_threshold)[:, None]
        return base + scheme.delta * mask
    return adjust


def watermarked_generate(scheme: WatermarkScheme, lm: ToyLM, prompt_ids, length: int,
                         rng: np.random.Generator, sources: np.ndarray | None = None) -> Generation:
    sampler = "greedy" if scheme.is_sampling else "multinomial"
    return generate(lm, prompt_ids, length, rng, sources=sources, sampler=sampler,
                    adjust=watermark_adjust(scheme, lm.vocab_size))


def watermarked_step(scheme: WatermarkScheme, lm: ToyLM, ctx: ContextKey, rng: np.random.Generator,
                     history: Sequence[int] = ()) -> int:
    """One watermarked token given ``ctx`` and the generated ``history`` so far."""
    if not isinstance(scheme, WatermarkScheme):
        raise ValueError(f"unknown scheme {scheme!r}")
    base = np.log(lm.next_dist(ctx))[None, :]
    hist = np.asarray([list(history)], dtype=np.int64).reshape(1, -1)
    scores = watermark_adjust(scheme, lm.vocab_size)(hist, hist.shape[1], base)
    if scheme.is_sampling:
        return int(np.argmax(scores[0]))
    p = np.exp(log_softmax(scores[0]))
    return int(rng.choice(lm.vocab_size, p=p / p.sum()))


# -- detection --------------------------------------------------------------------


def detect_z(seq: Sequence[int], key: GreenKey, gamma: float | None = None,
             weights: Sequence[float] | None = None, mask: Sequence[bool] | None = None,
             z_threshold: float = 4.0, prompt_salt: int = 0, hits: np.ndarray | None = None,
             scheme: str = "") -> Detection:
    """Green-fraction z-test, optionally entropy-weighted or restricted by ``mask``."""
    gamma = key.gamma if gamma is None else gamma
    if hits is None:
        hits = green_hits(key, np.asarray(seq)[None, :], prompt_salt)[0]
    hits = np.asarray(hits, dtype=bool)
    keep = np.ones(hits.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if weights is None:
        n = float(keep.sum())
        if n == 0:
            return Detection(0.0, None, z_threshold, False, 0.0, scheme)
        k = float(hits[keep].sum())
        z = (k - gamma * n) / math.sqrt(n * gamma * (1 - gamma))
        return Detection(z, None, z_threshold, bool(z > z_threshold), n, scheme)
    w = np.asarray(weights, dtype=float) * keep
    total, sq = float(w.sum()), float((w**2).sum())
    if sq == 0:
        return Detection(0.0, None, z_threshold, False, 0.0, scheme)
    z = (float(w[hits].sum()) - gamma * total) / math.sqrt(gamma * (1 - gamma) * sq)
    return Detection(z, None, z_threshold, bool(z > z_threshold), total, scheme)


def detector_rows(lm: ToyLM, seqs: np.ndarray, prompt_id: int = DETECTOR_PROMPT) -> np.ndarray:
    seqs = np.atleast_2d(seqs)
    pids = np.full(seqs.shape[0], prompt_id, dtype=np.uint64)
    return np.exp(token_logprobs(lm, seqs, pids, full=True))


def ewd_weights(detector_lm: ToyLM, seq: Sequence[int], prompt_id: int = DETECTOR_PROMPT) -> np.ndarray:
    """Normalised detector-side entropy per position, in [0, 1]."""
    rows = detector_rows(detector_lm, np.asarray(seq)[None, :], prompt_id)[0]
    return np.clip(shannon_entropy(rows) / math.log(detector_lm.vocab_size), 0.0, 1.0)


def sampling_scores(seqs: np.ndarray, key: SamplingKey) -> np.ndarray:
    """Per-token ``-log(1 - u)`` for the realised tokens."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    n, T = seqs.shape
    win = context_windows(seqs, key.ngram).reshape(n * T, key.ngram)
    state = fold_window(keyed_state(key.salt_key, n * T), win)
    u = token_uniform_at(state, seqs.reshape(-1))
    return -np.log1p(-u).reshape(n, T)


def detect_sampling(seq: Sequence[int], key: SamplingKey, alpha: float = 1e-4,
                    scores: np.ndarray | None = None, scheme: str = "PF") -> Detection:
    """Sum of exponential scores; Gamma(n, 1) upper tail under the null."""
    if scores is None:
        scores = sampling_scores(np.asarray(seq)[None, :], key)[0]
    n = len(scores)
    if n < 1:
        raise ValueError("empty sequence")
    s = float(np.sum(scores))
    p = float(gammaincc(n, s))
    return Detection(s, p, alpha, bool(p < alpha), float(n), scheme)


class Detector:
    """Scheme-aware detector over batches of equal-length sequences.

    ``lm`` is the detector-side model needed by SWEET and EWD for entropies.
    """

    def __init__(self, scheme: WatermarkScheme, lm: ToyLM | None = None, chunk: int = 256):
        if scheme.algorithm_name in ("SWEET", "EWD") and lm is None:
            raise ValueError(f"{scheme.algorithm_name} detection needs a detector LM")
        self.scheme = scheme
        self.lm = lm
        self.chunk = chunk

    def __call__(self, seq: Sequence[int]) -> Detection:
        return self.detect_many(np.asarray(seq)[None, :])[0]

    def detect_many(self, seqs) -> list[Detection]:
        if isinstance(seqs, np.ndarray) and seqs.dtype != object:
            seqs = np.atleast_2d(seqs)
            out: list[Detection] = []
            for i in range(0, seqs.shape[0], self.chunk):
                out.extend(self._detect_block(seqs[i:i + self.chunk]))
            return out
        return [self._detect_block(np.asarray(s, dtype=np.int64)[None, :])[0] for s in seqs]

    def statistics(self, seqs) -> np.ndarray:
        dets = self.detect_many(seqs)
        if self.scheme.is_sampling:
            return np.array([d.pvalue for d in dets])
        return np.array([d.statistic for d in dets])

    def _detect_block(self, seqs: np.ndarray) -> list[Detection]:
        s = self.scheme
        name = s.algorithm_name
        if s.is_sampling:
            scores = sampling_scores(seqs, s.sampling_key)
            return [detect_sampling(None, s.sampling_key, s.alpha, scores=row, scheme=name) for row in scores]
        hits = green_hits(s.green_key, seqs)
        weights = mask = None
        if name in ("SWEET", "EWD"):
            ent = shannon_entropy(detector_rows(self.lm, seqs))
            if name == "SWEET":
                mask = ent > s.entropy_threshold
            else:
                weights = np.clip(ent / math.log(self.lm.vocab_size), 0.0, 1.0)
        out = []
        for i in range(seqs.shape[0]):
            out.append(detect_z(None, s.green_key, s.gamma,
                                weights=None if weights is None else weights[i],
                                mask=None if mask is None else mask[i],
                                z_threshold=s.z_threshold, hits=hits[i], scheme=name))
        return out


def with_delta(scheme: WatermarkScheme, delta: float) -> WatermarkScheme:
    return replace(scheme, delta=delta)
