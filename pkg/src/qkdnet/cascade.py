"""Cascade reconciliation and hash-based error verification.

Bob drives the protocol: he asks Alice for parities of ranges of her key
(in the permuted order of a pass) and corrects his own key.  Alice's side
is :class:`CascadeAlice`, which only ever sees ``parity_request`` messages
and answers with ``parity`` messages.  Every parity Alice sends is one
leaked bit; requests carry only public range descriptions.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from qkdnet.channel import A_TO_B, B_TO_A, ClassicalChannel, unpack_bits
from qkdnet.core import binary_entropy
from qkdnet.privamp import ToeplitzSpec, toeplitz_stream

QBER_FLOOR = 0.005
_REQ = struct.Struct(">BII")


@dataclass(frozen=True)
class ReconciliationResult:
    corrected_key: np.ndarray
    leak_bits: int
    f_ec: float
    flips: int
    qber_estimate: float
    verified: bool = False
    verify_cost_bits: int = 0


def initial_block_size(qber_est: float) -> int:
    if not 0 < qber_est <= 0.5:
        raise ValueError(f"qber_est must be in (0, 0.5], got {qber_est}")
    # the rounding guard keeps exact ratios such as 0.73/0.25 from ceiling up
    return math.ceil(0.73 / qber_est - 1e-12)


def pass_permutations(n: int, iterations: int, seed: int) -> list[np.ndarray]:
    """Public permutations; pass 0 is the identity."""
    rng = np.random.default_rng(seed)
    perms = [np.arange(n)]
    for _ in range(1, iterations):
        perms.append(rng.permutation(n))
    return perms


def fec_efficiency(leak_bits: int, n_z: int, qber: float) -> float:
    if n_z <= 0:
        raise ValueError("n_z must be positive")
    if not 0 < qber < 0.5:
        raise ValueError(f"qber must be in (0, 0.5), got {qber}")
    return leak_bits / (n_z * binary_entropy(qber))


class CascadeAlice:
    """Alice's responder: answers range-parity requests on her fixed key."""

    def __init__(self, key, iterations: int, perm_seed: int):
        key = np.asarray(key, dtype=np.uint8)
        self._prefix = []
        for perm in pass_permutations(key.size, iterations, perm_seed):
            pre = np.zeros(key.size + 1, dtype=np.uint8)
            np.cumsum(key[perm], out=pre[1:], dtype=np.uint8)
            np.bitwise_and(pre, 1, out=pre)
            self._prefix.append(pre)

    def parities(self, pass_idx: int, starts, stops) -> np.ndarray:
        pre = self._prefix[pass_idx]
        return pre[stops] ^ pre[starts]

    def handle(self, payload: bytes) -> np.ndarray:
        reqs = [_REQ.unpack_from(payload, off) for off in range(0, len(payload), _REQ.size)]
        out = np.empty(len(reqs), dtype=np.uint8)
        for i, (p, a, b) in enumerate(reqs):
            pre = self._prefix[p]
            out[i] = pre[b] ^ pre[a]
        return out


def _encode_requests(pass_idx: int, starts, stops) -> bytes:
    return b"".join(_REQ.pack(pass_idx, int(a), int(b)) for a, b in zip(starts, stops))


class _Link:
    """Bob's view of the exchange with Alice over an optional channel."""

    def __init__(self, alice: CascadeAlice, channel: ClassicalChannel | None):
        self.alice = alice
        self.channel = channel
        self.leak = 0

    def ask(self, pass_idx: int, starts, stops) -> np.ndarray:
        payload = _encode_requests(pass_idx, starts, stops)
        if self.channel is not None:
            self.channel.send_bytes(B_TO_A, "parity_request", payload)
        bits = self.alice.handle(payload)
        if self.channel is not None:
            msg = self.channel.send_bits(A_TO_B, "parity", bits)
            bits = unpack_bits(msg.payload, msg.bitlen)
        self.leak += int(bits.size)
        return bits


def run_cascade(
    key_a,
    key_b,
    qber_est: float,
    iterations: int = 8,
    channel: ClassicalChannel | None = None,
    perm_seed: int = 0,
    qber_floor: float = QBER_FLOOR,
) -> ReconciliationResult:
    """Reconcile ``key_b`` to ``key_a``; ``key_a`` is never modified."""
    key_a = np.asarray(key_a, dtype=np.uint8)
    bob = np.array(key_b, dtype=np.uint8, copy=True)
    n = key_a.size
    if bob.size != n:
        raise ValueError(f"key length mismatch: {n} vs {bob.size}")
    if n == 0:
        raise ValueError("keys must be non-empty")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if channel is not None:
        channel.send_bytes(B_TO_A, "seed", struct.pack(">Q", perm_seed & (2**64 - 1)))
    alice = CascadeAlice(key_a, iterations, perm_seed)
    link = _Link(alice, channel)
    perms = pass_permutations(n, iterations, perm_seed)
    k1 = initial_block_size(max(qber_est, qber_floor))

    sizes: list[int] = []
    where: list[np.ndarray] = []  # where[p][j]: position of key bit j in pass p order
    alice_par: list[np.ndarray] = []
    bob_par: list[np.ndarray] = []
    odd: list[set] = []
    heaps: list[list] = []  # lazy min-heaps over odd[p]; stale entries skipped
    flips = 0

    def block_bounds(p, blk):
        return blk * sizes[p], min(n, (blk + 1) * sizes[p])

    def flip(j):
        bob[j] ^= 1
        for p in range(len(sizes)):
            blk = where[p][j] // sizes[p]
            bob_par[p][blk] ^= 1
            if bob_par[p][blk] != alice_par[p][blk]:
                if blk not in odd[p]:
                    odd[p].add(blk)
                    heapq.heappush(heaps[p], blk)
            else:
                odd[p].discard(blk)

    def search(p, blk):
        lo, hi = block_bounds(p, blk)
        perm = perms[p]
        while hi - lo > 1:
            mid = (lo + hi) // 2
            a = link.ask(p, [lo], [mid])[0]
            b = int(bob[perm[lo:mid]].sum()) & 1
            if a != b:
                hi = mid
            else:
                lo = mid
        return int(perm[lo])

    for i in range(iterations):
        k = min(n, k1 << i)
        perm = perms[i]
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        nblk = -(-n // k)
        starts = np.arange(nblk) * k
        stops = np.minimum(starts + k, n)
        a_par = link.ask(i, starts, stops)
        permuted = bob[perm]
        csum = np.concatenate(([0], np.cumsum(permuted, dtype=np.int64)))
        b_par = ((csum[stops] - csum[starts]) & 1).astype(np.uint8)
        sizes.append(k)
        where.append(inv)
        alice_par.append(a_par)
        bob_par.append(b_par)
        start_odd = np.flatnonzero(a_par != b_par).tolist()
        odd.append(set(start_odd))
        heaps.append(start_odd)  # already sorted, hence a valid heap
        while True:
            p = next((q for q in range(len(odd)) if odd[q]), None)
            if p is None:
                break
            h = heaps[p]
            while h[0] not in odd[p]:
                heapq.heappop(h)
            blk = h[0]
            flip(search(p, blk))
            flips += 1

    q_hat = flips / n
    q_for_f = q_hat if 0 < q_hat < 0.5 else None
    f_ec = fec_efficiency(link.leak, n, q_for_f) if q_for_f else float("nan")
    return ReconciliationResult(
        corrected_key=bob,
        leak_bits=link.leak,
        f_ec=f_ec,
        flips=flips,
        qber_estimate=q_hat,
    )


def verify_hash_bits(eps_corr: float) -> int:
    if not 0 < eps_corr < 1:
        raise ValueError(f"eps_corr must be in (0, 1), got {eps_corr}")
    # float guard: 1/eps can land a hair above an exact power of two
    return max(1, math.ceil(math.log2(1.0 / eps_corr) - 1e-9))


def universal_hash(key, seed_bits, t: int) -> np.ndarray:
    key = np.asarray(key, dtype=np.uint8)
    return toeplitz_stream(ToeplitzSpec(key.size, t, seed_bits), key)


def verify(
    key_a,
    key_b,
    eps_corr: float,
    channel: ClassicalChannel | None = None,
    seed: int | None = None,
    hash_bits: int | None = None,
) -> tuple[bool, int]:
    """Compare t-bit Toeplitz hashes of both keys under a public random seed.

    ``t = ceil(log2(1/eps_corr))`` unless ``hash_bits`` overrides it (used to
    test collision rates at a measurable width).  Returns ``(verified, t)``.
    """
    key_a = np.asarray(key_a, dtype=np.uint8)
    key_b = np.asarray(key_b, dtype=np.uint8)
    if key_a.size != key_b.size:
        raise ValueError(f"key length mismatch: {key_a.size} vs {key_b.size}")
    t = verify_hash_bits(eps_corr) if hash_bits is None else int(hash_bits)
    n = key_a.size
    if t > n:
        # a hash wider than the key would not compress; pad with zeros
        pad = np.zeros(t - n, dtype=np.uint8)
        key_a, key_b, n = np.concatenate([key_a, pad]), np.concatenate([key_b, pad]), t
    seed_bits = np.random.default_rng(seed).integers(0, 2, n + t - 1, dtype=np.uint8)
    if channel is not None:
        msg = channel.send_bits(A_TO_B, "seed", seed_bits)
        seed_bits_b = unpack_bits(msg.payload, msg.bitlen)
    else:
        seed_bits_b = seed_bits
    h_a = universal_hash(key_a, seed_bits, t)
    if channel is not None:
        msg = channel.send_bits(A_TO_B, "hash", h_a)
        h_a = unpack_bits(msg.payload, msg.bitlen)
    h_b = universal_hash(key_b, seed_bits_b, t)
    ok = bool(np.array_equal(h_a, h_b))
    if channel is not None:
        channel.send_bits(B_TO_A, "verdict", [int(ok)])
    return ok, t
