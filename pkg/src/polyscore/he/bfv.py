"""Scale-invariant leveled encryption over RNS polynomial rings.

One scalar plaintext per ciphertext (the message sits in coefficient 0;
all other plaintext coefficients are identically zero, which doubles as
the test-mode integrity probe). Ciphertext-by-ciphertext products are
computed exactly: inputs are base-extended to a joint RNS basis wide
enough for the integer tensor product, multiplied there via NTT, scaled
by t/q with correct rounding, and folded back to the ciphertext basis.
Relinearization uses one digit per RNS limb.
"""

from __future__ import annotations

import math
import os
import secrets
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..errors import (DecryptionIntegrityError, NoiseBudgetExhausted,
                      ParameterError)
from . import ring, ntt
from .noise import NoiseState
from .params import HeParams

# ops recorded when an audit scope is active (see record_ops)
_OP_TRACE: List[list] = []


class record_ops:
    """Context manager collecting the names of homomorphic ops executed."""

    def __enter__(self):
        self.ops: list = []
        _OP_TRACE.append(self.ops)
        return self.ops

    def __exit__(self, *exc):
        _OP_TRACE.remove(self.ops)
        return False


def _trace(name: str):
    for sink in _OP_TRACE:
        sink.append(name)


def _test_mode() -> bool:
    return os.environ.get("POLYSCORE_TEST_MODE", "") == "1"


@dataclass
class RingElement:
    """Element of Z_q[X]/(X^n+1) as per-limb residues (limbs, n)."""

    res: np.ndarray

    @property
    def n(self) -> int:
        return self.res.shape[1]

    def copy(self) -> "RingElement":
        return RingElement(self.res.copy())

    def to_ints(self, basis) -> list:
        return ring.crt_reconstruct(self.res, basis)


@dataclass
class SecretKey:
    ternary: np.ndarray  # (n,) int64 in {-1, 0, 1}
    res: np.ndarray  # residues in basis Q
    squared_res: np.ndarray  # s^2 residues in basis Q


@dataclass
class SessionKeys:
    """(pk, sk, ek) triple; sk stays wherever keygen ran."""

    params: HeParams
    pk: Tuple[RingElement, RingElement]
    sk: Optional[SecretKey]
    ek: List[Tuple[RingElement, RingElement]]
    pk_ntt: Optional[Tuple[np.ndarray, np.ndarray]] = None
    ek_ntt: Optional[list] = None

    def public_only(self) -> "SessionKeys":
        return SessionKeys(self.params, self.pk, None, self.ek,
                           self.pk_ntt, self.ek_ntt)

    def ensure_caches(self):
        bq = self.params.basis_q
        if self.pk_ntt is None:
            self.pk_ntt = (ring.ntt_forward(self.pk[0].res, bq),
                           ring.ntt_forward(self.pk[1].res, bq))
        if self.ek_ntt is None:
            self.ek_ntt = [(ring.ntt_forward(e0.res, bq),
                            ring.ntt_forward(e1.res, bq)) for e0, e1 in self.ek]


@dataclass
class Ciphertext:
    """Encrypted scalar plus bookkeeping.

    noise_budget_bits is the conservative static estimate; it never
    increases under homomorphic ops.
    """

    params: HeParams
    parts: List[RingElement]
    scale_bits: int
    noise: NoiseState

    @property
    def size(self) -> int:
        return len(self.parts)

    @property
    def noise_budget_bits(self) -> float:
        return max(self.params.noise_model.budget(self.noise), 0.0)

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.params, [p.copy() for p in self.parts],
                          self.scale_bits, self.noise)


def _rng(seed) -> np.random.Generator:
    if seed is None:
        return np.random.default_rng(secrets.randbits(128))
    return np.random.default_rng(seed)


def keygen(params: HeParams, seed: Optional[int] = None) -> SessionKeys:
    """Fresh (pk, sk, ek); deterministic per seed, entropy-seeded otherwise."""
    rng = _rng(seed)
    bq = params.basis_q
    n = params.ring_degree
    s_ter = ring.sample_ternary(n, rng)
    s_res = ring.to_residues(s_ter, bq)
    s2_res = ring.negacyclic_mul(s_res, s_res, bq)

    a = ring.sample_uniform(bq, n, rng)
    e = ring.to_residues(ring.sample_gaussian(n, params.error_stddev, rng), bq)
    pk0 = ring.neg(ring.add(ring.negacyclic_mul(a, s_res, bq), e, bq), bq)
    pk = (RingElement(pk0), RingElement(a))

    ek = []
    for i in range(len(params.coeff_primes)):
        ai = ring.sample_uniform(bq, n, rng)
        ei = ring.to_residues(ring.sample_gaussian(n, params.error_stddev, rng), bq)
        ek0 = ring.neg(ring.add(ring.negacyclic_mul(ai, s_res, bq), ei, bq), bq)
        # the RNS gadget: add s^2 on limb i only ((q/q_i)*inv term is 1 there)
        ek0[i] = (ek0[i] + s2_res[i]) % bq.ps[i]
        ek.append((RingElement(ek0), RingElement(ai)))

    keys = SessionKeys(params, pk, SecretKey(s_ter, s_res, s2_res), ek)
    keys.ensure_caches()
    return keys


def _delta_m_residues(m: int, params: HeParams) -> np.ndarray:
    """Per-limb residues of round(m * q / t) for m in [0, t)."""
    q, t = params.q, params.plaintext_modulus
    scaled = (m * q + t // 2) // t
    return ring.int_to_residues(scaled, params.basis_q)


def encrypt(m: int, keys: SessionKeys, rng=None, scale_bits: int = 0,
            value_log2: Optional[float] = None) -> Ciphertext:
    """Encrypt an integer in [0, t); randomized, so repeats differ."""
    params = keys.params
    t = params.plaintext_modulus
    m = int(m) % t
    keys.ensure_caches()
    rng = rng if rng is not None else _rng(None)
    bq = params.basis_q
    n = params.ring_degree

    u = ring.ntt_forward(ring.to_residues(ring.sample_ternary(n, rng), bq), bq)
    e1 = ring.to_residues(ring.sample_gaussian(n, params.error_stddev, rng), bq)
    e2 = ring.to_residues(ring.sample_gaussian(n, params.error_stddev, rng), bq)

    c0 = np.empty_like(u)
    ntt.mul_batch(keys.pk_ntt[0], u, bq.ps, bq.pinvs, c0)
    ntt.intt_batch(c0, bq.ipsi, bq.ps, bq.pinvs, bq.ninv)
    c0 = ring.add(c0, e1, bq)
    c0[:, 0] = (c0[:, 0] + _delta_m_residues(m, params)) % bq.ps

    c1 = np.empty_like(u)
    ntt.mul_batch(keys.pk_ntt[1], u, bq.ps, bq.pinvs, c1)
    ntt.intt_batch(c1, bq.ipsi, bq.ps, bq.pinvs, bq.ninv)
    c1 = ring.add(c1, e2, bq)

    _trace("encrypt")
    noise = params.noise_model.fresh(value_log2)
    return Ciphertext(params, [RingElement(c0), RingElement(c1)],
                      scale_bits, noise)


def _inner_coefficient(c: Ciphertext, sk: SecretKey, position: int) -> int:
    """Coefficient `position` of c0 + c1 s + c2 s^2 as an integer in [0, q)."""
    params = c.params
    bq = params.basis_q
    acc = c.parts[0].res[:, position].astype(np.uint64).copy()
    key_polys = [sk.res, sk.squared_res]
    out = np.empty(bq.size, dtype=np.uint64)
    for idx, part in enumerate(c.parts[1:]):
        ntt.coeff_dot(np.ascontiguousarray(part.res), key_polys[idx],
                      position, bq.ps, bq.pinvs, out)
        acc = (acc + out) % bq.ps
    return ring.crt_reconstruct_one(acc, bq)


def _round_message(v: int, params: HeParams) -> int:
    q, t = params.q, params.plaintext_modulus
    return ((v * t + q // 2) // q) % t


def decrypt(c: Ciphertext, sk: SecretKey, check: Optional[bool] = None) -> int:
    """Recover the scalar plaintext mod t.

    Outside test mode an exhausted static budget raises before any work.
    In test mode decryption proceeds and the known-zero plaintext slots
    act as an integrity probe: corruption raises DecryptionIntegrityError.
    """
    if c.size > 3:
        raise ParameterError("decrypt supports ciphertexts of size <= 3")
    check = _test_mode() if check is None else check
    if c.params.noise_model.budget(c.noise) <= 0 and not check:
        raise NoiseBudgetExhausted(
            f"static noise budget exhausted ({c.params.noise_model.budget(c.noise):.1f} bits)"
        )
    m = _round_message(_inner_coefficient(c, sk, 0), c.params)
    if check:
        n = c.params.ring_degree
        for probe in (1, n // 2, n - 1):
            if _round_message(_inner_coefficient(c, sk, probe), c.params) != 0:
                raise DecryptionIntegrityError(
                    f"known-zero slot {probe} decrypted nonzero; noise overflow"
                )
    _trace("decrypt")
    return m


def measured_noise_budget(c: Ciphertext, sk: SecretKey) -> float:
    """Actual invariant-noise headroom in bits (needs sk; diagnostic)."""
    params = c.params
    bq = params.basis_q
    q, t = params.q, params.plaintext_modulus
    acc = c.parts[0].res.copy()
    key = [sk.res, sk.squared_res]
    for idx, part in enumerate(c.parts[1:]):
        prod = ring.negacyclic_mul(part.res, key[idx], bq)
        acc = ring.add(acc, prod, bq)
    coeffs = ring.crt_reconstruct(acc, bq)
    worst = 0
    for v in coeffs:
        frac = (t * v) % q
        if frac > q // 2:
            frac = q - frac
        worst = max(worst, frac)
    if worst == 0:
        return params.noise_model.log_q
    return math.log2(q) - 1.0 - math.log2(worst)


def _check_compat(a: Ciphertext, b: Ciphertext):
    if a.params.fingerprint() != b.params.fingerprint():
        raise ParameterError("ciphertexts use different parameter sets")
    if a.scale_bits != b.scale_bits:
        raise ParameterError(
            f"scale mismatch: 2^{a.scale_bits} vs 2^{b.scale_bits}")


def he_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Dec(add(Enc a, Enc b)) = a + b (mod t)."""
    _check_compat(a, b)
    bq = a.params.basis_q
    size = max(a.size, b.size)
    parts = []
    for i in range(size):
        if i < a.size and i < b.size:
            parts.append(RingElement(ring.add(a.parts[i].res, b.parts[i].res, bq)))
        else:
            src = a.parts[i] if i < a.size else b.parts[i]
            parts.append(src.copy())
    _trace("he_add")
    return Ciphertext(a.params, parts, a.scale_bits,
                      a.params.noise_model.add(a.noise, b.noise))


def he_add_plain(a: Ciphertext, p: int) -> Ciphertext:
    """Add a plaintext integer (interpreted mod t, at the same scale)."""
    params = a.params
    t = params.plaintext_modulus
    p_mod = int(p) % t
    out = a.copy()
    out.parts[0].res[:, 0] = (out.parts[0].res[:, 0]
                              + _delta_m_residues(p_mod, params)) % params.basis_q.ps
    _trace("he_add_plain")
    centered = p_mod if p_mod <= t // 2 else p_mod - t
    out.noise = params.noise_model.add_plain(a.noise, abs(centered))
    return out


def he_mul_plain(a: Ciphertext, w: int, scale_bits: int = 0) -> Ciphertext:
    """Multiply by a signed plaintext integer; scales add."""
    params = a.params
    bq = params.basis_q
    w = int(w)
    w_res = ring.int_to_residues(w, bq)
    parts = [RingElement(ring.scalar_mul(p.res, w_res, bq)) for p in a.parts]
    _trace("he_mul_plain")
    return Ciphertext(params, parts, a.scale_bits + scale_bits,
                      params.noise_model.mul_plain(a.noise, abs(w)))


def he_mul(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Tensor product with exact t/q scaling; result has size 3."""
    _check_compat(a, b)
    if a.size != 2 or b.size != 2:
        raise ParameterError("relinearize before multiplying again")
    params = a.params
    bq, bp, bj = params.basis_q, params.basis_p, params.basis_joint
    k = bq.size
    ext = params.basis_q.extension_tables(bp)

    def joint(ct):
        rows = [np.vstack([p.res, ring.base_extend(p.res, bq, bp, ext)])
                for p in ct.parts]
        for r in rows:
            ntt.ntt_batch(r, bj.psi, bj.ps, bj.pinvs)
        return rows

    fa = joint(a)
    fb = fa if b is a else joint(b)

    prods = []
    for combo in ((0, 0), (0, 1), (1, 1)):
        out = np.empty_like(fa[0])
        ntt.mul_batch(fa[combo[0]], fb[combo[1]], bj.ps, bj.pinvs, out)
        if combo == (0, 1) and b is not a:
            extra = np.empty_like(out)
            ntt.mul_batch(fa[1], fb[0], bj.ps, bj.pinvs, extra)
            ntt.add_batch(out, extra, bj.ps, out)
        elif combo == (0, 1):
            ntt.add_batch(out, out, bj.ps, out)  # 2*c0*c1 for squaring
        ntt.intt_batch(out, bj.ipsi, bj.ps, bj.pinvs, bj.ninv)
        prods.append(out)

    parts = [RingElement(_scale_round(x, params)) for x in prods]
    _trace("he_mul")
    return Ciphertext(params, parts, a.scale_bits + b.scale_bits,
                      params.noise_model.mul(a.noise, b.noise))


def _scale_round(x_joint: np.ndarray, params: HeParams) -> np.ndarray:
    """round(t * X / q) mod q for X given in the joint basis."""
    bq, bp = params.basis_q, params.basis_p
    k = bq.size
    t = params.plaintext_modulus
    half_q = params.q // 2

    # Y = t*X + floor(q/2), per limb of the joint basis
    yq = x_joint[:k].copy()
    yp = x_joint[k:].copy()
    t_q = ring.int_to_residues(t, bq)
    t_p = ring.int_to_residues(t, bp)
    yq = ring.scalar_mul(yq, t_q, bq)
    yp = ring.scalar_mul(yp, t_p, bp)
    yq = (yq + ring.int_to_residues(half_q, bq)[:, None]) % bq.ps[:, None]
    yp = (yp + ring.int_to_residues(half_q, bp)[:, None]) % bp.ps[:, None]
    yq = yq.astype(np.uint64)
    yp = yp.astype(np.uint64)

    # floor(Y / q) = (Y - (Y mod q)) / q, computed in the auxiliary basis
    ext_qp = bq.extension_tables(bp)
    y_mod_q_in_p = ring.base_extend(yq, bq, bp, ext_qp)
    diff = ring.sub(yp, y_mod_q_in_p, bp)
    r_p = ring.scalar_mul(diff, params.q_inv_mod_aux, bp)

    # fold the quotient (which is the rounded result) back to basis Q
    ext_pq = bp.extension_tables(bq)
    return ring.base_extend(r_p, bp, bq, ext_pq)


def relinearize(c: Ciphertext, ek_or_keys) -> Ciphertext:
    """Reduce a size-3 ciphertext back to size 2 using the evaluation key."""
    if c.size == 2:
        return c.copy()
    if c.size != 3:
        raise ParameterError("relinearize expects size-3 ciphertexts")
    keys = ek_or_keys
    if isinstance(keys, SessionKeys):
        keys.ensure_caches()
        ek_ntt = keys.ek_ntt
    else:
        ek_ntt = keys
    params = c.params
    bq = params.basis_q
    k = bq.size
    c2 = c.parts[2].res

    acc0 = ring.ntt_forward(c.parts[0].res, bq)
    acc1 = ring.ntt_forward(c.parts[1].res, bq)
    for i in range(k):
        digit = c2[i].astype(np.int64)
        d_res = ring.to_residues(digit, bq)
        ntt.ntt_batch(d_res, bq.psi, bq.ps, bq.pinvs)
        ntt.mul_acc_batch(d_res, ek_ntt[i][0], bq.ps, bq.pinvs, acc0)
        ntt.mul_acc_batch(d_res, ek_ntt[i][1], bq.ps, bq.pinvs, acc1)
    out0 = ring.ntt_inverse(acc0, bq)
    out1 = ring.ntt_inverse(acc1, bq)
    _trace("relinearize")
    return Ciphertext(params, [RingElement(out0), RingElement(out1)],
                      c.scale_bits, params.noise_model.relinearize(c.noise))
