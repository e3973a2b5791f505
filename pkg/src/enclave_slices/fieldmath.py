"""Prime-field arithmetic for masked offloading and Freivalds verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, SecurityError

MERSENNE_31 = 2**31 - 1
ACCEPT = "ACCEPT"
REJECT = "REJECT"

_F64_EXACT = 2**53
_I64_SAFE = 2**63 - 1


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for n < 3.3e24."""
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)
    for q in small:
        if n % q == 0:
            return n == q
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class FieldSpec:
    p: int = MERSENNE_31

    def __post_init__(self):
        if self.p <= 2**8:
            raise ConfigError(f"field modulus {self.p} must exceed 2^8")
        if self.p >= 2**32:
            raise ConfigError("field residues must fit in u32")
        if not is_prime(self.p):
            raise ConfigError(f"field modulus {self.p} is not prime")

    def max_fan_in(self) -> int:
        """Largest fan-in whose int8 x int8 accumulators stay below p/2."""
        return (self.p // 2 - 1) // (128 * 127)

    def check_fan_in(self, fan_in: int) -> None:
        if 128 * 127 * fan_in >= self.p / 2:
            raise ConfigError(f"fan-in {fan_in} can overflow the field (p={self.p}); use a larger prime")


def exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer ``a @ b`` computed exactly (float64 BLAS when every partial sum fits 53 bits)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return np.zeros(a.shape[:-1] + b.shape[1:], dtype=np.int64)
    bound = int(np.abs(a).max()) * int(np.abs(b).max()) * a.shape[-1]
    if bound < _F64_EXACT:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    if bound < _I64_SAFE:
        return a @ b
    raise ContractError("integer matmul would overflow 64-bit accumulators")


def to_field(q, p: int) -> np.ndarray:
    return np.mod(np.asarray(q, dtype=np.int64), p)


def mask(h_hat, r, p: int) -> np.ndarray:
    """h_e = (h_hat + r) mod p."""
    h_hat = np.asarray(h_hat, dtype=np.int64)
    r = np.asarray(r, dtype=np.int64)
    if h_hat.shape != r.shape:
        raise DimensionError(f"pad shape {r.shape} does not match activation {h_hat.shape}")
    return np.mod(h_hat + r, p)


def unmask(y_e, g_r, p: int) -> np.ndarray:
    """(y_e - g(r)) mod p, i.e. g(h_hat) as a field residue."""
    if g_r is None:
        raise SecurityError("no pad image available for unmasking")
    y_e = np.asarray(y_e, dtype=np.int64)
    g_r = np.asarray(g_r, dtype=np.int64)
    if y_e.shape != g_r.shape:
        raise DimensionError(f"pad image shape {g_r.shape} does not match response {y_e.shape}")
    return np.mod(y_e - g_r, p)


def centered_lift(v, p: int) -> np.ndarray:
    """Map residues to the signed representatives in (-p/2, p/2]."""
    v = np.asarray(v, dtype=np.int64)
    return np.where(v > p // 2, v - p, v)


def dot_mod(a, b, p: int) -> np.ndarray:
    """Row-wise inner products mod p of residue arrays shaped (n, ...)."""
    a = np.asarray(a, dtype=np.int64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.int64).reshape(len(b), -1)
    if a.shape != b.shape:
        raise DimensionError(f"inner product of {a.shape} and {b.shape}")
    if a.shape[1] >= 2**16:
        raise ContractError("vector too long for split-limb inner product")
    lo = (a * (b & 0xFFFF)).sum(axis=1) % p
    hi = (a * (b >> 16)).sum(axis=1) % p
    return (hi * 65536 + lo) % p


@dataclass
class FreivaldsKey:
    s: np.ndarray  # shaped like one output sample
    s_tilde: np.ndarray  # adjoint of the layer applied to s, shaped like one input sample
    digest: bytes = b""


def freivalds_check(h, y, key: FreivaldsKey, p: int) -> str:
    """ACCEPT iff <y_i, s> == <h_i, s_tilde> (mod p) for every sample i."""
    h = np.asarray(h, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if h.ndim == key.s_tilde.ndim:
        h, y = h[None], y[None]
    n = len(h)
    if len(y) != n or y.shape[1:] != key.s.shape or h.shape[1:] != key.s_tilde.shape:
        return REJECT
    s = np.broadcast_to(np.mod(key.s, p), y.shape)
    st = np.broadcast_to(np.mod(key.s_tilde, p), h.shape)
    ok = dot_mod(np.mod(y, p), s, p) == dot_mod(np.mod(h, p), st, p)
    return ACCEPT if bool(ok.all()) else REJECT
