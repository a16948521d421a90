"""Numba kernels for negacyclic polynomial arithmetic in RNS form.

Every ring element is a (limbs, n) uint64 array of residues, one row per
prime of the active basis. Limb primes stay below 2^51 so the quotient of
a 102-bit product can be estimated exactly enough in float64 (error within
a few units) and corrected with conditional subtractions; no 128-bit
arithmetic is needed.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

U64 = np.uint64
F64 = np.float64

# |Sum y_i/q_i - float estimate| is ~2^-50; fractional parts closer than
# this to an integer fall back to exact big-int evaluation.
FBE_EPS = 2.0 ** -38


@njit(cache=True, inline="always")
def _mm(a, b, p, pinv):
    """a*b mod p for a,b < p < 2^51, division-free."""
    q = U64(F64(a) * F64(b) * pinv)
    r = a * b - q * p + U64(4) * p
    if r >= U64(4) * p:
        r -= U64(4) * p
    if r >= U64(2) * p:
        r -= U64(2) * p
    if r >= p:
        r -= p
    return r


@njit(cache=True)
def _ntt_limb(a, psi_rev, p, pinv):
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            j1 = 2 * i * t
            s = psi_rev[m + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = _mm(a[j + t], s, p, pinv)
                w = u + v
                if w >= p:
                    w -= p
                a[j] = w
                x = u + p - v
                if x >= p:
                    x -= p
                a[j + t] = x
        m <<= 1


@njit(cache=True)
def _intt_limb(a, ipsi_rev, p, pinv, ninv):
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        j1 = 0
        h = m >> 1
        for i in range(h):
            s = ipsi_rev[h + i]
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                w = u + v
                if w >= p:
                    w -= p
                a[j] = w
                a[j + t] = _mm(u + p - v, s, p, pinv)
            j1 += 2 * t
        t <<= 1
        m >>= 1
    for j in range(n):
        a[j] = _mm(a[j], ninv, p, pinv)


@njit(cache=True, parallel=True)
def ntt_batch(a, psi_rev, ps, pinvs):
    """In-place forward NTT of every limb row of a (L, n)."""
    for l in prange(a.shape[0]):
        _ntt_limb(a[l], psi_rev[l], ps[l], pinvs[l])


@njit(cache=True, parallel=True)
def intt_batch(a, ipsi_rev, ps, pinvs, ninvs):
    """In-place inverse NTT of every limb row of a (L, n)."""
    for l in prange(a.shape[0]):
        _intt_limb(a[l], ipsi_rev[l], ps[l], pinvs[l], ninvs[l])


@njit(cache=True)
def mul_batch(a, b, ps, pinvs, out):
    """out = a*b elementwise per limb; shapes (L, n)."""
    for l in range(a.shape[0]):
        p = ps[l]
        pinv = pinvs[l]
        for j in range(a.shape[1]):
            out[l, j] = _mm(a[l, j], b[l, j], p, pinv)


@njit(cache=True)
def mul_acc_batch(a, b, ps, pinvs, out):
    """out += a*b elementwise per limb (mod p)."""
    for l in range(a.shape[0]):
        p = ps[l]
        pinv = pinvs[l]
        for j in range(a.shape[1]):
            v = out[l, j] + _mm(a[l, j], b[l, j], p, pinv)
            if v >= p:
                v -= p
            out[l, j] = v


@njit(cache=True)
def add_batch(a, b, ps, out):
    for l in range(a.shape[0]):
        p = ps[l]
        for j in range(a.shape[1]):
            v = a[l, j] + b[l, j]
            if v >= p:
                v -= p
            out[l, j] = v


@njit(cache=True)
def sub_batch(a, b, ps, out):
    for l in range(a.shape[0]):
        p = ps[l]
        for j in range(a.shape[1]):
            v = a[l, j] + p - b[l, j]
            if v >= p:
                v -= p
            out[l, j] = v


@njit(cache=True)
def scalar_mul_batch(a, w, ps, pinvs, out):
    """out = a * w[l] per limb; w holds the per-limb residues of one scalar."""
    for l in range(a.shape[0]):
        p = ps[l]
        pinv = pinvs[l]
        s = w[l]
        for j in range(a.shape[1]):
            out[l, j] = _mm(a[l, j], s, p, pinv)


@njit(cache=True)
def dense_accumulate(cts, wres, ps, pinvs, out):
    """out[part] = sum_i cts[i, part] * wres[i] (mod p per limb).

    cts: (m, parts, L, n); wres: (m, L); out: (parts, L, n) zeroed by caller.
    Products are < 2^51 so up to 4096 terms fit an uint64 accumulator.
    """
    m, parts, L, n = cts.shape
    for part in range(parts):
        for l in range(L):
            p = ps[l]
            pinv = pinvs[l]
            for j in range(n):
                acc = U64(0)
                for i in range(m):
                    acc += _mm(cts[i, part, l, j], wres[i, l], p, pinv)
                out[part, l, j] = acc % p


@njit(cache=True)
def fbe_kernel(x, qtilde, qs, qinvs_f, big_mod_target, mod_target, tps, tpinvs,
               out, frac_out):
    """Fast base extension of x (k, n) to a target basis (m limbs).

    big_mod_target[i, j] = (Q/q_i) mod target_j; mod_target[j] = Q mod target_j.
    Writes residues into out (m, n) and the float fractional estimate into
    frac_out (n,) so the caller can exact-fix suspicious coefficients.
    """
    k, n = x.shape
    m = out.shape[0]
    for j in range(n):
        f = 0.0
        for i in range(k):
            y = _mm(x[i, j], qtilde[i], qs[i], qinvs_f[i])
            x[i, j] = y  # reuse as scratch: x now holds y_i
            f += F64(y) * qinvs_f[i]
        frac_out[j] = f
    for tl in range(m):
        p = tps[tl]
        pinv = tpinvs[tl]
        for j in range(n):
            alpha = U64(frac_out[j])
            acc = U64(0)
            for i in range(k):
                acc += _mm(x[i, j], big_mod_target[i, tl], p, pinv)
            v = (acc + (U64(8) * p - _mm(alpha, mod_target[tl], p, pinv))) % p
            out[tl, j] = v


@njit(cache=True)
def coeff_dot(c, b, r, ps, pinvs, out):
    """Coefficient r of the negacyclic product c*b, per limb.

    c, b: (L, n); out: (L,). Products below X^n add, wrapped ones subtract.
    """
    L, n = c.shape
    for l in range(L):
        p = ps[l]
        pinv = pinvs[l]
        acc = U64(0)
        cnt = 0
        for j in range(n):
            idx = r - j
            if idx >= 0:
                v = _mm(c[l, j], b[l, idx], p, pinv)
            else:
                v = p - _mm(c[l, j], b[l, idx + n], p, pinv)
                if v == p:
                    v = U64(0)
            acc += v
            cnt += 1
            if cnt == 4096:
                acc %= p
                cnt = 0
        out[l] = acc % p


@njit(cache=True)
def reduce_rows(values, ps, out):
    """out[l, :] = values mod ps[l] for a signed int64 vector `values`."""
    n = values.shape[0]
    for l in range(ps.shape[0]):
        p = np.int64(ps[l])
        for j in range(n):
            v = values[j] % p
            if v < 0:
                v += p
            out[l, j] = U64(v)


def bit_reverse_indices(n: int) -> np.ndarray:
    logn = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(logn):
        rev |= ((idx >> b) & 1) << (logn - 1 - b)
    return rev


def make_ntt_tables(prime: int, n: int):
    """(psi_rev, ipsi_rev, ninv) uint64 tables for one prime and ring degree."""
    for g in range(2, 1000):
        psi = pow(g, (prime - 1) // (2 * n), prime)
        if pow(psi, n, prime) == prime - 1:
            break
    else:  # pragma: no cover
        raise ValueError(f"no 2n-th root of unity mod {prime}")
    ipsi = pow(psi, prime - 2, prime)
    rev = bit_reverse_indices(n)
    powers = np.empty(n, dtype=np.uint64)
    ipowers = np.empty(n, dtype=np.uint64)
    acc = 1
    iacc = 1
    tmp = np.empty(n, dtype=object)
    itmp = np.empty(n, dtype=object)
    for i in range(n):
        tmp[i] = acc
        itmp[i] = iacc
        acc = (acc * psi) % prime
        iacc = (iacc * ipsi) % prime
    for i in range(n):
        powers[rev[i]] = tmp[i]
        ipowers[rev[i]] = itmp[i]
    ninv = pow(n, prime - 2, prime)
    return powers, ipowers, np.uint64(ninv)
