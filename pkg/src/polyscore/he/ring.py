"""Ring element helpers: sampling, RNS conversion, NTT products, CRT.

A ring element of Z_q[X]/(X^n + 1) is carried as a (limbs, n) uint64
residue matrix. Helpers here are thin wrappers over the numba kernels
plus the exact big-int paths used for CRT reconstruction and for the
rare base-extension coefficients the float estimate cannot settle.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ntt
from .ntt import FBE_EPS


def to_residues(values: np.ndarray, basis) -> np.ndarray:
    """Signed int64 coefficient vector -> (L, n) residues."""
    values = np.ascontiguousarray(values, dtype=np.int64)
    out = np.empty((basis.size, values.shape[0]), dtype=np.uint64)
    ntt.reduce_rows(values, basis.ps, out)
    return out


def int_to_residues(value: int, basis) -> np.ndarray:
    """One big integer -> per-limb residues (L,)."""
    return np.array([value % p for p in basis.primes], dtype=np.uint64)


def sample_uniform(basis, n: int, rng) -> np.ndarray:
    out = np.empty((basis.size, n), dtype=np.uint64)
    for l, p in enumerate(basis.primes):
        out[l] = rng.integers(0, p, n, dtype=np.uint64)
    return out


def sample_ternary(n: int, rng) -> np.ndarray:
    return rng.integers(-1, 2, n).astype(np.int64)


def sample_gaussian(n: int, sigma: float, rng) -> np.ndarray:
    return np.rint(rng.normal(0.0, sigma, n)).astype(np.int64)


def ntt_forward(res: np.ndarray, basis) -> np.ndarray:
    out = np.ascontiguousarray(res.copy())
    ntt.ntt_batch(out, basis.psi, basis.ps, basis.pinvs)
    return out


def ntt_inverse(res: np.ndarray, basis) -> np.ndarray:
    out = np.ascontiguousarray(res.copy())
    ntt.intt_batch(out, basis.ipsi, basis.ps, basis.pinvs, basis.ninv)
    return out


def negacyclic_mul(a: np.ndarray, b: np.ndarray, basis) -> np.ndarray:
    """Exact product of two ring elements given by residues."""
    fa = ntt_forward(a, basis)
    fb = ntt_forward(b, basis)
    out = np.empty_like(fa)
    ntt.mul_batch(fa, fb, basis.ps, basis.pinvs, out)
    ntt.intt_batch(out, basis.ipsi, basis.ps, basis.pinvs, basis.ninv)
    return out


def add(a: np.ndarray, b: np.ndarray, basis) -> np.ndarray:
    out = np.empty_like(a)
    ntt.add_batch(a, b, basis.ps, out)
    return out


def sub(a: np.ndarray, b: np.ndarray, basis) -> np.ndarray:
    out = np.empty_like(a)
    ntt.sub_batch(a, b, basis.ps, out)
    return out


def neg(a: np.ndarray, basis) -> np.ndarray:
    out = (basis.ps[:, None] - a) % basis.ps[:, None]
    return out.astype(np.uint64)


def scalar_mul(a: np.ndarray, scalar_residues: np.ndarray, basis) -> np.ndarray:
    out = np.empty_like(a)
    ntt.scalar_mul_batch(a, scalar_residues, basis.ps, basis.pinvs, out)
    return out


def crt_reconstruct(res: np.ndarray, basis) -> list:
    """Residues (L, n) -> python ints in [0, product)."""
    Q = basis.product
    weights = []
    for p in basis.primes:
        Qp = Q // p
        weights.append(Qp * pow(Qp, p - 2, p))
    cols = res.shape[1]
    out = []
    for j in range(cols):
        v = 0
        for i in range(res.shape[0]):
            v += int(res[i, j]) * weights[i]
        out.append(v % Q)
    return out


def crt_reconstruct_one(col: np.ndarray, basis) -> int:
    Q = basis.product
    v = 0
    for i, p in enumerate(basis.primes):
        Qp = Q // p
        v += int(col[i]) * (Qp * pow(Qp, p - 2, p))
    return v % Q


def base_extend(res: np.ndarray, src, dst, tables) -> np.ndarray:
    """Exact fast base extension src -> dst.

    `tables` is src.extension_tables(dst). The float fractional estimate
    settles alpha for nearly all coefficients; the rest are recomputed
    with exact integer arithmetic.
    """
    qt, big_mod, prod_mod = tables
    scratch = np.ascontiguousarray(res.copy())
    n = res.shape[1]
    out = np.empty((dst.size, n), dtype=np.uint64)
    frac = np.empty(n, dtype=np.float64)
    ntt.fbe_kernel(scratch, qt, src.ps, src.pinvs, big_mod, prod_mod,
                   dst.ps, dst.pinvs, out, frac)
    dist = np.abs(frac - np.rint(frac))
    suspicious = np.nonzero(dist < FBE_EPS)[0]
    if suspicious.size:
        Q = src.product
        qdivs = [Q // p for p in src.primes]
        for j in suspicious:
            v = 0
            for i in range(src.size):
                v += int(scratch[i, j]) * qdivs[i]
            v %= Q
            for tl, r in enumerate(dst.primes):
                out[tl, j] = v % r
    return out
