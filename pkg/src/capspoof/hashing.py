"""Stateless 64-bit keyed mixing used by the toy LM and every watermark PRF.

All functions operate on numpy ``uint64`` arrays so that a whole batch of
contexts can be hashed at once. Overflow wraps modulo 2**64 by design.
"""

from __future__ import annotations

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_TOKEN_MUL = np.uint64(0xD6E8FEB86659FD93)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 2.0**-53


def mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer applied elementwise."""
    z = np.asarray(x, dtype=np.uint64)
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def as_u64(values) -> np.ndarray:
    """Coerce python ints (possibly > 2**63) or int arrays to uint64."""
    if isinstance(values, np.ndarray):
        if values.dtype == np.uint64:
            return values
        return values.astype(np.int64).view(np.uint64) if values.dtype.kind == "i" else values.astype(np.uint64)
    if isinstance(values, (int, np.integer)):
        return np.array([int(values) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.array([int(v) & 0xFFFFFFFFFFFFFFFF for v in values], dtype=np.uint64)


def keyed_state(key: int, n: int, *columns: np.ndarray) -> np.ndarray:
    """Fold ``key`` and any number of per-row integer columns into one state per row.

    ``key`` is a scalar or one key per row. Columns may hold -1 (padding);
    every value is shifted by one before mixing so padding never collides
    with token 0.
    """
    h = np.broadcast_to(mix64(as_u64(key) ^ _GOLDEN), (n,)).copy()
    for col in columns:
        c = as_u64(np.asarray(col)).reshape(n) + np.uint64(1)
        h = mix64(h ^ (c * _GOLDEN))
    return h


def fold_window(state: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Fold a ``(n, w)`` window of token ids (``-1`` = padding) into ``state``."""
    window = np.asarray(window)
    for j in range(window.shape[1]):
        c = window[:, j].astype(np.int64).view(np.uint64) + np.uint64(1)
        state = mix64(state ^ (c * _GOLDEN))
    return state


def token_bits(state: np.ndarray, n_tokens: int) -> np.ndarray:
    """Raw 64-bit hash of (state, token) for every token id; shape ``(n, n_tokens)``."""
    toks = (np.arange(1, n_tokens + 1, dtype=np.uint64) * _TOKEN_MUL)[None, :]
    return mix64(state[:, None] ^ toks)


def to_unit(bits: np.ndarray) -> np.ndarray:
    """Map 64-bit hashes to floats strictly inside (0, 1)."""
    return ((bits >> _S11).astype(np.float64) + 0.5) * _INV53


def token_uniforms(state: np.ndarray, n_tokens: int) -> np.ndarray:
    return to_unit(token_bits(state, n_tokens))


def token_uniform_at(state: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Same values as ``token_uniforms(state, V)[i, tokens[i]]`` without the full row."""
    t = (np.asarray(tokens).astype(np.int64).view(np.uint64) + np.uint64(1)) * _TOKEN_MUL
    return to_unit(mix64(state ^ t))
