"""Prime pools for the RNS coefficient bases and plaintext moduli.

All limb primes are 51 bits (below the 2^51 float-trick ceiling) and
congruent to 1 mod 16384 so a negacyclic NTT exists for every supported
ring degree (2048, 4096, 8192). The pool is split: the first rows back
ciphertext moduli, the tail backs the auxiliary multiplication basis.
"""

# 51-bit primes, p = 1 (mod 2*8192), ascending.
LIMB_PRIMES = (
    1125899906990081,
    1125899907219457,
    1125899907776513,
    1125899908005889,
    1125899908022273,
    1125899908612097,
    1125899908988929,
    1125899909038081,
    1125899909185537,
    1125899909349377,
    1125899909398529,
    1125899909840897,
)

# Plaintext moduli, also 1 mod 16384.
PLAINTEXT_30BIT = 935165953
PLAINTEXT_45BIT = 34700000198657


def coeff_primes(count: int):
    """First `count` limb primes (ciphertext modulus factors)."""
    return LIMB_PRIMES[:count]


def aux_primes(count: int, skip: int):
    """`count` auxiliary primes disjoint from the first `skip` limb primes."""
    if skip + count > len(LIMB_PRIMES):
        raise ValueError("prime pool exhausted")
    return LIMB_PRIMES[skip: skip + count]
