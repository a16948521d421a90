"""Encryption parameter sets and circuit-driven parameter planning.

Three named presets trade ring degree and modulus size for capacity:

============  ======  =========================  ============  =========
name          n       ciphertext modulus q       plaintext t   depth
============  ======  =========================  ============  =========
toy2048       2048    2 x 51-bit primes (~2^102)  30-bit prime  0
mid4096       4096    3 x 51-bit primes (~2^153)  45-bit prime  1
big8192       8192    5 x 51-bit primes (~2^255)  45-bit prime  2
============  ======  =========================  ============  =========

Security here is desk-scale, documented, and deliberately not a
production 128-bit claim: moduli are oversized for their ring degrees so
that exact integer circuits fit without plaintext packing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Dict, Optional, Tuple

import numpy as np

from ..errors import ConversionError, ParameterError
from ..fixedpoint import LoweredNet, lower
from ..network import PolyNetwork, multiplicative_depth
from .noise import NoiseModel, NoiseState
from .ntt import make_ntt_tables
from .primes import PLAINTEXT_30BIT, PLAINTEXT_45BIT, aux_primes, coeff_primes

DEFAULT_SIGMA = 3.2
DEFAULT_DECOMP_BITS = 51  # one digit per RNS limb
NOISE_MARGIN_BITS = 2.0

PRESET_ORDER = ("toy2048", "mid4096", "big8192")
_PRESET_SPECS = {
    "toy2048": dict(n=2048, k=2, m=3, t=PLAINTEXT_30BIT),
    "mid4096": dict(n=4096, k=3, m=5, t=PLAINTEXT_45BIT),
    "big8192": dict(n=8192, k=5, m=7, t=PLAINTEXT_45BIT),
}


def _is_probable_prime(v: int) -> bool:
    if v < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if v % p == 0:
            return v == p
    d = v - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, v)
        if x in (1, v - 1):
            continue
        for _ in range(r - 1):
            x = x * x % v
            if x == v - 1:
                break
        else:
            return False
    return True


class _Basis:
    """Stacked NTT tables and constants for one list of primes."""

    def __init__(self, primes: Tuple[int, ...], n: int):
        self.primes = tuple(primes)
        self.n = n
        self.size = len(primes)
        self._ext_cache: Dict[tuple, tuple] = {}
        self.ps = np.array(primes, dtype=np.uint64)
        self.pinvs = 1.0 / self.ps.astype(np.float64)
        psi, ipsi, ninv = [], [], []
        for p in primes:
            a, b, c = make_ntt_tables(p, n)
            psi.append(a)
            ipsi.append(b)
            ninv.append(c)
        self.psi = np.stack(psi)
        self.ipsi = np.stack(ipsi)
        self.ninv = np.array(ninv, dtype=np.uint64)
        self.product = reduce(lambda a, b: a * b, primes, 1)

    def extension_tables(self, target: "_Basis"):
        """Constants for fast base extension self -> target (cached)."""
        key = target.primes
        cached = self._ext_cache.get(key)
        if cached is not None:
            return cached
        k = self.size
        m = target.size
        qt = np.empty(k, dtype=np.uint64)
        for i, p in enumerate(self.primes):
            qt[i] = pow(self.product // p, p - 2, p)
        big_mod = np.empty((k, m), dtype=np.uint64)
        for i, p in enumerate(self.primes):
            for j, r in enumerate(target.primes):
                big_mod[i, j] = (self.product // p) % r
        prod_mod = np.array([self.product % r for r in target.primes], dtype=np.uint64)
        self._ext_cache[key] = (qt, big_mod, prod_mod)
        return self._ext_cache[key]


_BASIS_CACHE: Dict[Tuple[Tuple[int, ...], int], _Basis] = {}


def _basis(primes: Tuple[int, ...], n: int) -> _Basis:
    key = (tuple(primes), n)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = _Basis(primes, n)
    return _BASIS_CACHE[key]


@dataclass
class HeParams:
    """Ring, modulus and noise parameters for one session."""

    name: str
    ring_degree: int
    coeff_primes: Tuple[int, ...]
    plaintext_modulus: int
    aux_primes: Tuple[int, ...]
    error_stddev: float = DEFAULT_SIGMA
    decomposition_base_bits: int = DEFAULT_DECOMP_BITS
    packing_enabled: bool = False

    def __post_init__(self):
        n = self.ring_degree
        if n <= 0 or n & (n - 1):
            raise ParameterError("ring degree must be a power of two")
        if self.error_stddev <= 0:
            raise ParameterError("error stddev must be positive")
        t = self.plaintext_modulus
        if not _is_probable_prime(t):
            raise ParameterError("plaintext modulus must be prime")
        q = 1
        for p in self.coeff_primes:
            q *= p
        if not t < q:
            raise ParameterError("plaintext modulus must be below q")
        if self.packing_enabled and (t - 1) % (2 * n) != 0:
            raise ParameterError("packing needs t = 1 (mod 2n)")
        aux = 1
        for p in self.aux_primes:
            aux *= p
        if aux <= t * n * q:
            raise ParameterError("auxiliary basis too small for exact products")

    # -- derived state (memoized; tables shared read-only) -------------------

    @property
    def q(self) -> int:
        if "_q" not in self.__dict__:
            out = 1
            for p in self.coeff_primes:
                out *= p
            self.__dict__["_q"] = out
        return self.__dict__["_q"]

    @property
    def basis_q(self) -> _Basis:
        return _basis(self.coeff_primes, self.ring_degree)

    @property
    def basis_p(self) -> _Basis:
        return _basis(self.aux_primes, self.ring_degree)

    @property
    def basis_joint(self) -> _Basis:
        return _basis(self.coeff_primes + self.aux_primes, self.ring_degree)

    @property
    def noise_model(self) -> NoiseModel:
        if "_nm" not in self.__dict__:
            self.__dict__["_nm"] = NoiseModel(
                self.ring_degree, self.plaintext_modulus, self.q,
                self.error_stddev, len(self.coeff_primes),
                max(self.coeff_primes))
        return self.__dict__["_nm"]

    @property
    def q_inv_mod_aux(self) -> np.ndarray:
        if "_qinv_p" not in self.__dict__:
            self.__dict__["_qinv_p"] = np.array(
                [pow(self.q % p, p - 2, p) for p in self.aux_primes],
                dtype=np.uint64)
        return self.__dict__["_qinv_p"]

    def fingerprint(self) -> str:
        import hashlib

        payload = f"{self.ring_degree}|{self.coeff_primes}|{self.plaintext_modulus}"
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def describe(self) -> str:
        bits = sum(p.bit_length() for p in self.coeff_primes)
        return (f"{self.name}: n={self.ring_degree}, log2(q)~{bits}, "
                f"t={self.plaintext_modulus} ({self.plaintext_modulus.bit_length()}-bit), "
                f"sigma={self.error_stddev}")


def preset(name: str) -> HeParams:
    if name not in _PRESET_SPECS:
        raise ParameterError(f"unknown parameter set {name!r}; "
                             f"choose from {PRESET_ORDER}")
    spec = _PRESET_SPECS[name]
    return HeParams(
        name=name,
        ring_degree=spec["n"],
        coeff_primes=coeff_primes(spec["k"]),
        plaintext_modulus=spec["t"],
        aux_primes=aux_primes(spec["m"], skip=5),
    )


# --------------------------------------------------------------------------
# Parameter planning from a circuit
# --------------------------------------------------------------------------


def _simulate_net_noise(lnet: LoweredNet, model: NoiseModel) -> float:
    """Worst-case end-of-circuit budget for one lowered network."""
    state = model.fresh(math.log2(max(lnet.input_int_bound, 2)))
    for layer in lnet.layers:
        k = layer.kind
        if k in ("Dense", "Conv"):
            w = layer.weights if k == "Dense" else layer.kernels
            wmax = float(max((abs(int(v)) for v in w.reshape(-1)), default=1))
            fan_in = w.shape[0] if k == "Dense" else int(np.prod(w.shape[1:]))
            term = model.mul_plain(state, wmax)
            acc = term
            for _ in range(max(fan_in - 1, 0)):
                acc = model.add(acc, term)
            bmax = float(max((abs(int(v)) for v in layer.bias.reshape(-1)), default=0))
            state = model.add_plain(acc, max(bmax, 1.0))
        elif k == "SquareActivation":
            state = model.relinearize(model.mul(state, state))
        elif k == "SigmoidPoly":
            z2 = model.relinearize(model.mul(state, state))
            z3 = model.relinearize(model.mul(z2, state))
            lin = model.mul_plain(state, float(layer.c1))
            cub = model.mul_plain(z3, float(abs(layer.c3)))
            state = model.add_plain(model.add(lin, cub), float(layer.c0))
        elif k == "ScaledMeanPool":
            acc = state
            for _ in range(layer.window - 1):
                acc = model.add(acc, state)
            state = acc
    return model.budget(state)


def plan_parameters(net: PolyNetwork, input_bits: int, weight_bits: int,
                    input_range: float = 1.0) -> HeParams:
    """Choose the smallest preset that evaluates `net` exactly.

    The network is lowered at the requested precisions, worst-case integer
    magnitudes are propagated through every layer, and a preset qualifies
    when its plaintext modulus exceeds twice the largest magnitude and the
    static noise model leaves positive headroom at the end of the circuit.
    """
    if not net.he_compatible:
        raise ConversionError("parameter planning needs a polynomial network")
    depth = multiplicative_depth(net).depth
    lnet = lower(net, input_bits, weight_bits, input_range)
    bound = lnet.max_bound
    failures = []
    for name in PRESET_ORDER:
        params = preset(name)
        if params.plaintext_modulus <= 2 * bound:
            failures.append(f"{name}: t <= 2*bound")
            continue
        headroom = _simulate_net_noise(lnet, params.noise_model)
        if headroom < NOISE_MARGIN_BITS:
            failures.append(f"{name}: noise headroom {headroom:.1f} bits")
            continue
        return params
    raise ParameterError(
        f"no parameter set fits: magnitude bound 2^{math.log2(max(bound, 1)):.1f}, "
        f"multiplicative depth {depth} ({'; '.join(failures)})"
    )
