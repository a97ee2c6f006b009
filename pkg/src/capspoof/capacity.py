"""Binary-KL machinery and the local capacity bound for KL-bounded updates.

Infinite divergences are returned as ``math.inf``; IEEE infinities compare
totally against finite floats, so budgets may also be ``inf``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

BISECT_TOL = 1e-10
BISECT_MAX_ITER = 200


def _xlogy_ratio(a: float, b: float) -> float:
    # a*log(a/b) with 0*log(0/b) = 0 and a*log(a/0) = +inf for a > 0
    if a == 0.0:
        return 0.0
    if b == 0.0:
        return math.inf
    return a * math.log(a / b)


def binary_kl(p: float, q: float) -> float:
    """KL divergence between Bernoulli(p) and Bernoulli(q), in nats."""
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise ValueError("arguments must lie in [0, 1]")
    d = _xlogy_ratio(p, q) + _xlogy_ratio(1.0 - p, 1.0 - q)
    return max(d, 0.0)


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("dimension mismatch")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return max(float(np.sum(p[support] * np.log(p[support] / q[support]))), 0.0)


def capacity_sup(q: float, C: float, tol: float = BISECT_TOL) -> float:
    """Largest ``lam`` in [0, 1] with ``binary_kl(lam, q) <= C``.

    ``lam -> binary_kl(lam, q)`` increases on ``[q, 1]``, so the supremum is
    found by bisection on that interval.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if C < 0:
        raise ValueError("budget must be >= 0")
    if C == 0:
        # d(lam||q) = 0 only at lam = q; bisection cannot resolve this, since
        # near q the divergence is quadratic and rounds to 0 in floating point
        return q
    if binary_kl(1.0, q) <= C:
        return 1.0
    lo, hi = q, 1.0
    for _ in range(BISECT_MAX_ITER):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if binary_kl(mid, q) <= C:
            lo = mid
        else:
            hi = mid
    return lo


def capacity_mass(dist: Sequence[float]) -> float:
    """Probability mass outside the most likely token."""
    return float(1.0 - np.max(dist))


@dataclass(frozen=True)
class CapacityReport:
    q: float
    c_t: float
    kl_used: float
    lambda_star: float
    lhs: float
    slack: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def theorem1_check(pi: Sequence[float], ph: Sequence[float], A: Iterable[int] = ()) -> CapacityReport:
    """Compare the mass gained on ``A`` against the capacity bound."""
    pi = np.asarray(pi, dtype=float)
    ph = np.asarray(ph, dtype=float)
    if pi.shape != ph.shape:
        raise ValueError("dimension mismatch")
    idx = np.fromiter(A, dtype=np.int64)
    lhs = float(pi[idx].sum() - ph[idx].sum()) if idx.size else 0.0
    q = capacity_mass(ph)
    kl = kl_divergence(pi, ph)
    lam = capacity_sup(q, kl)
    return CapacityReport(q=q, c_t=q, kl_used=kl, lambda_star=lam, lhs=lhs, slack=lam - lhs)


def coarsened_kl(pi: Sequence[float], ph: Sequence[float]) -> float:
    """KL after collapsing tokens into {mode of ph, everything else}."""
    pi = np.asarray(pi, dtype=float)
    ph = np.asarray(ph, dtype=float)
    mode = int(np.argmax(ph))
    return binary_kl(min(max(1.0 - pi[mode], 0.0), 1.0), min(max(1.0 - ph[mode], 0.0), 1.0))


def vanishing_capacity_probe(C: float, q_sequence: Iterable[float]) -> list[float]:
    return [capacity_sup(q, C) for q in q_sequence]


def factorized_gain(pi: Sequence[float], ph: Sequence[float], pwm: Sequence[float],
                    atol: float = 0.0) -> tuple[float, float]:
    """Surrogate gain ``sum (pi - ph) log(pwm/ph)`` and its capacity-scaled form.

    Requires ``pi`` to keep the mode mass of ``ph`` (within ``atol``).
    """
    pi = np.asarray(pi, dtype=float)
    ph = np.asarray(ph, dtype=float)
    pwm = np.asarray(pwm, dtype=float)
    mode = int(np.argmax(ph))
    if abs(pi[mode] - ph[mode]) > atol:
        raise ValueError("mode mass not preserved")
    c = capacity_mass(ph)
    if c <= 0:
        raise ValueError("capacity mass must be positive")
    llr = np.log(pwm / ph)
    lhs = float(np.sum((pi - ph) * llr))
    off = np.arange(len(ph)) != mode
    rhs = float(c * np.sum((pi[off] - ph[off]) / c * llr[off]))
    return lhs, rhs
