"""Toeplitz-hash privacy amplification.

Index convention: the l x n matrix is ``T[i][j] = seed[j - i + l - 1]``, so
the seed has ``n + l - 1`` bits, ``seed[l-1]`` is the main diagonal and
``seed[0]`` the top-right corner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from qkdnet.channel import A_TO_B, ClassicalChannel, unpack_bits
from qkdnet.core import KeyMaterial

# input bits convolved per FFT; bounds the per-chunk integer sums well below 2**53
STREAM_CHUNK = 1 << 18
# up to this many output rows the hash is computed row by row
_ROWWISE_MAX_L = 64


class NoSecureKey(ValueError):
    """Raised when the secure length is not positive: the block is discarded."""


@dataclass(frozen=True)
class ToeplitzSpec:
    n: int
    l: int
    seed: np.ndarray

    def __post_init__(self):
        seed = np.asarray(self.seed, dtype=np.uint8)
        object.__setattr__(self, "seed", seed)
        if not 0 < self.l <= self.n:
            raise ValueError(f"need 0 < l <= n, got l={self.l}, n={self.n}")
        if seed.size != self.n + self.l - 1:
            raise ValueError(f"seed must have n + l - 1 = {self.n + self.l - 1} bits, got {seed.size}")

    @classmethod
    def random(cls, n: int, l: int, rng: np.random.Generator) -> ToeplitzSpec:
        return cls(n, l, rng.integers(0, 2, n + l - 1, dtype=np.uint8))


def _check_key(spec: ToeplitzSpec, key) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint8)
    if key.size != spec.n:
        raise ValueError(f"key has {key.size} bits, spec expects {spec.n}")
    return key


def toeplitz_dense(spec: ToeplitzSpec, key) -> np.ndarray:
    """Reference implementation that builds the full matrix. Test use only."""
    key = _check_key(spec, key)
    i = np.arange(spec.l)[:, None]
    j = np.arange(spec.n)[None, :]
    mat = spec.seed[j - i + spec.l - 1].astype(np.int64)
    return ((mat @ key.astype(np.int64)) & 1).astype(np.uint8)


def toeplitz_stream(spec: ToeplitzSpec, key) -> np.ndarray:
    """Toeplitz hash without materializing the matrix.

    Row ``i`` is the window ``seed[l-1-i : l-1-i+n]``, so the output is a
    sliding correlation of the key against the seed.  The key is consumed in
    chunks of ``STREAM_CHUNK`` bits; each chunk's contribution to all rows is
    one FFT convolution of size ``chunk + l``, reduced mod 2 and XOR-ed into
    the output.  Memory is O(chunk + l).
    """
    key = _check_key(spec, key)
    n, l, seed = spec.n, spec.l, spec.seed
    if l <= _ROWWISE_MAX_L:
        kf = key.astype(np.int64)
        out = np.empty(l, dtype=np.uint8)
        for i in range(l):
            r = l - 1 - i
            out[i] = int(seed[r : r + n] @ kf) & 1
        return out
    acc = np.zeros(l, dtype=np.uint8)
    for j0 in range(0, n, STREAM_CHUNK):
        kc = key[j0 : j0 + STREAM_CHUNK]
        c = kc.size
        if not kc.any():
            continue
        seg = seed[j0 : j0 + c + l - 1]
        size = sfft.next_fast_len(seg.size + c - 1, real=True)
        conv = sfft.irfft(
            sfft.rfft(seg.astype(np.float64), size) * sfft.rfft(kc[::-1].astype(np.float64), size),
            size,
        )
        # corr[r] = sum_u kc[u] * seg[u + r] sits at conv[r + c - 1]
        corr = np.rint(conv[c - 1 : c - 1 + l]).astype(np.int64)
        acc ^= (corr & 1).astype(np.uint8)[::-1]
    return acc


def amplify(
    key,
    l_secret: int,
    channel: ClassicalChannel | None = None,
    seed: int | None = None,
    *,
    link_id: str = "",
    epoch: int = 0,
    eps_sec: float = 1e-9,
    eps_corr: float = 1e-12,
    seed_bits=None,
) -> tuple[KeyMaterial, KeyMaterial]:
    """Alice draws and publishes a Toeplitz seed; both sides hash their key.

    ``key`` is either one array (both parties hold the same bits) or an
    ``(alice_key, bob_key)`` pair.  Returns Alice's and Bob's key material.
    """
    if isinstance(key, tuple):
        key_a, key_b = (np.asarray(k, dtype=np.uint8) for k in key)
    else:
        key_a = key_b = np.asarray(key, dtype=np.uint8)
    n = key_a.size
    if l_secret <= 0:
        raise NoSecureKey(f"no secure key extractable (l = {l_secret})")
    if l_secret > n:
        raise ValueError(f"l_secret {l_secret} exceeds key length {n}")
    if seed_bits is None:
        seed_bits = np.random.default_rng(seed).integers(0, 2, n + l_secret - 1, dtype=np.uint8)
    if channel is not None:
        msg = channel.send_bits(A_TO_B, "pa_seed", seed_bits)
        bob_seed = unpack_bits(msg.payload, msg.bitlen)
    else:
        bob_seed = seed_bits
    out_a = toeplitz_stream(ToeplitzSpec(n, l_secret, seed_bits), key_a)
    out_b = toeplitz_stream(ToeplitzSpec(n, l_secret, bob_seed), key_b)
    meta = dict(link_id=link_id, epoch=epoch, eps_sec=eps_sec, eps_corr=eps_corr)
    return KeyMaterial(out_a, **meta), KeyMaterial(out_b, **meta)
