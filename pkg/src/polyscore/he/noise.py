"""Static worst-case noise accounting.

The same model backs three things: the conservative budget carried on
real ciphertexts, the simulated backend's counter, and the feasibility
check in parameter planning. All quantities live in log2 space. The
model is sound: measured noise never exceeds the estimate, so a circuit
the model accepts decrypts correctly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _log2addexp(*vals) -> float:
    out = -math.inf
    for v in vals:
        out = float(np.logaddexp2(out, v))
    return out


@dataclass(frozen=True)
class NoiseState:
    """Noise magnitude and plaintext-value magnitude, both log2."""

    noise: float
    value: float


class NoiseModel:
    """Worst-case noise propagation for one parameter set."""

    def __init__(self, n: int, t: int, q: int, sigma: float, k_limbs: int,
                 max_limb: int):
        self.n = n
        self.t = t
        self.log_t = math.log2(t)
        self.log_q = math.log2(q)
        self.bound = 6.0 * sigma  # high-probability bound on one error coeff
        self.log_n2 = math.log2(n + 2)
        # relinearization adds sum_i d_i * e_i with digits below the limb size
        self.relin_add = math.log2(k_limbs) + math.log2(n) + math.log2(max_limb) \
            + math.log2(self.bound)

    # -- budget ------------------------------------------------------------

    def budget(self, s: NoiseState) -> float:
        """Bits of headroom before decryption fails (can go negative)."""
        return self.log_q - (self.log_t + 1.0) - s.noise

    def fresh(self, value_log2: float | None = None) -> NoiseState:
        v = self.log_t - 1.0 if value_log2 is None else min(value_log2, self.log_t)
        noise = math.log2(self.bound * (2 * self.n + 1) + 1.0)
        return NoiseState(noise, v)

    # -- ops ---------------------------------------------------------------

    def add(self, a: NoiseState, b: NoiseState) -> NoiseState:
        return NoiseState(_log2addexp(a.noise, b.noise),
                          min(_log2addexp(a.value, b.value), self.log_t))

    def add_plain(self, a: NoiseState, plain_abs: float) -> NoiseState:
        # rounding of plain*q/t contributes at most 1
        lp = math.log2(max(plain_abs, 1.0))
        return NoiseState(_log2addexp(a.noise, 0.0),
                          min(_log2addexp(a.value, lp), self.log_t))

    def mul_plain(self, a: NoiseState, plain_abs: float) -> NoiseState:
        lp = math.log2(max(abs(plain_abs), 1.0))
        return NoiseState(a.noise + lp, min(a.value + lp, self.log_t))

    def mul(self, a: NoiseState, b: NoiseState) -> NoiseState:
        # dominant terms of the scale-invariant product noise, with +-2 bits
        # of slack for the [0,q) representatives and the RNS scale rounding
        tn = self.log_t + self.log_n2 + 2.0
        grow = tn + _log2addexp(a.noise, b.noise)
        value_term = tn + _log2addexp(a.value, b.value)
        cross = _log2addexp(a.value + b.noise, b.value + a.noise)
        rounding = 2.0 * math.log2(self.n) + 2.0
        return NoiseState(_log2addexp(grow, value_term, cross, rounding),
                          min(a.value + b.value, self.log_t))

    def relinearize(self, a: NoiseState) -> NoiseState:
        return NoiseState(_log2addexp(a.noise, self.relin_add), a.value)
