"""Learning-rate algebra and cumulative bonuses.

The step size after the ``t``-th visit is ``eta_t = (H+1)/(H+t)``; the weight
that visit ``i`` carries after ``t`` visits is
``eta_i * prod_{j=i+1..t} (1 - eta_j)``.  A round moves a visit count from
``N_lo`` to ``N_hi`` and everything here is a function of that window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RateWindow:
    H: int
    N_lo: int
    N_hi: int
    iota: float

    def __post_init__(self):
        if not 0 <= self.N_lo < self.N_hi:
            raise ValueError(f"need 0 <= N_lo < N_hi, got {self.N_lo}, {self.N_hi}")
        if self.iota <= 0:
            raise ValueError("iota must be positive")


@dataclass(frozen=True)
class BonusConstants:
    c_b: float = math.sqrt(2.0)
    c_b_R: float = 2.0
    c_b_R2: float = 1.0
    beta: float = 0.05

    def validate(self, H: int) -> None:
        if min(self.c_b, self.c_b_R, self.c_b_R2, self.beta) <= 0:
            raise ValueError("bonus constants and beta must be positive")
        if self.beta > H:
            raise ValueError(f"beta must lie in (0, H]; got {self.beta} with H={H}")


def eta(t: int, H: int) -> float:
    if t < 1:
        raise ValueError("eta is defined for t >= 1")
    return (H + 1) / (H + t)


def eta_weight(i: int, t: int, H: int) -> float:
    """Weight of the ``i``-th visit after ``t`` visits (``eta_0^0 = 1``, ``eta_0^t = 0``)."""
    if i < 0 or i > t:
        raise ValueError(f"need 0 <= i <= t, got i={i}, t={t}")
    if i == 0:
        return 1.0 if t == 0 else 0.0
    w = eta(i, H)
    for j in range(i + 1, t + 1):
        w *= 1.0 - eta(j, H)
    return w


def eta_complement(n1: int, n2: int, H: int) -> float:
    """``prod_{t=n1..n2} (1 - eta_t)``."""
    if n1 < 1 or n1 > n2:
        raise ValueError(f"need 1 <= n1 <= n2, got {n1}, {n2}")
    p = 1.0
    for t in range(n1, n2 + 1):
        p *= 1.0 - eta(t, H)
    return p


def alpha_rate(w: RateWindow) -> float:
    """Aggregate step size of a round: ``1 - eta_complement(N_lo+1, N_hi)``."""
    return 1.0 - eta_complement(w.N_lo + 1, w.N_hi, w.H)


# Windows up to this length are summed in plain Python (cheaper than numpy
# call overhead); longer ones are vectorized.  Either way results are
# deterministic functions of the window.
_SHORT_WINDOW = 48


def window_weights(N_lo: int, N_hi: int, H: int) -> list[float] | np.ndarray:
    """``[eta_t^{N_hi} for t in N_lo+1..N_hi]`` via a suffix product of complements."""
    if N_hi - N_lo <= _SHORT_WINDOW:
        out = []
        tail = 1.0
        for t in range(N_hi, N_lo, -1):
            rate = (H + 1) / (H + t)
            out.append(rate * tail)
            tail *= 1.0 - rate
        out.reverse()
        return out
    t = np.arange(N_lo + 1, N_hi + 1, dtype=np.float64)
    rates = (H + 1) / (H + t)
    tail = np.ones_like(rates)
    tail[:-1] = np.cumprod((1.0 - rates[:0:-1]))[::-1]
    return rates * tail


def _weighted_sum(weights, values) -> float:
    if isinstance(weights, list):
        total = 0.0
        for w, v in zip(weights, values):
            total += w * v
        return total
    return float(weights @ np.asarray(values))


def hoeffding_bonus(w: RateWindow, c: BonusConstants) -> float:
    scale = w.H**3 * w.iota
    if w.N_hi - w.N_lo <= _SHORT_WINDOW:
        b = [c.c_b * math.sqrt(scale / t) for t in range(w.N_lo + 1, w.N_hi + 1)]
    else:
        b = c.c_b * np.sqrt(scale / np.arange(w.N_lo + 1, w.N_hi + 1, dtype=np.float64))
    return _weighted_sum(window_weights(w.N_lo, w.N_hi, w.H), b)


def beta_R(
    mu_R: float,
    sigma_R: float,
    mu_A: float,
    sigma_A: float,
    N: int,
    H: int,
    iota: float,
    c_b_R: float,
) -> float:
    """Variance-aware bonus scale from the reference and advantage moments.

    Empirical variances are clamped at zero before the square root.
    """
    if N < 1:
        raise ValueError("N must be positive")
    var_ref = max(0.0, sigma_R - mu_R * mu_R)
    var_adv = max(0.0, sigma_A - mu_A * mu_A)
    return c_b_R * math.sqrt(iota / N) * (math.sqrt(var_ref) + math.sqrt(H * var_adv))


def reference_bonus(
    w: RateWindow, beta_R_prev: float, beta_R_new: float, c: BonusConstants
) -> float:
    """Cumulative reference-advantage bonus over the window.

    Interior visits use the start-of-round ``beta_R_prev``; the last visit
    uses the correction that swaps in ``beta_R_new``.  Not clamped.
    """
    H, lo, hi, iota = w.H, w.N_lo, w.N_hi, w.iota
    weights = window_weights(lo, hi, H)
    scale = c.c_b_R2 * H * H * iota
    total = 0.0
    if hi - lo > 1:
        if isinstance(weights, list):
            interior = [beta_R_prev + scale / t for t in range(lo + 1, hi)]
        else:
            interior = beta_R_prev + scale / np.arange(lo + 1, hi, dtype=np.float64)
        total = _weighted_sum(weights[:-1], interior)
    eta_last = eta(hi, H)
    last = (1.0 - 1.0 / eta_last) * beta_R_prev + beta_R_new / eta_last + scale / hi
    return total + float(weights[-1]) * last


def iota_theory(S: int, A: int, T1: int, p: float) -> float:
    """``log(28 S A T1 / p)`` for failure probability ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if T1 < 1:
        raise ValueError("T1 must be positive")
    return math.log(28.0 * S * A * T1 / p)
