import math

import numpy as np
import pytest

from qkdnet.cascade import (
    QBER_FLOOR,
    fec_efficiency,
    initial_block_size,
    run_cascade,
    verify,
    verify_hash_bits,
)
from qkdnet.channel import ClassicalChannel
from qkdnet.core import binary_entropy

from oracles import cascade_first_pass_flip


def bits(s):
    return np.array([int(c) for c in s], dtype=np.uint8)


def noisy_pair(rng, n, q):
    a = rng.integers(0, 2, n, dtype=np.uint8)
    return a, a ^ (rng.random(n) < q).astype(np.uint8)


@pytest.mark.parametrize("q, k", [(0.25, 3), (0.0129, 57), (0.0082, 90), (0.029, 26)])
def test_initial_block_size(q, k):
    assert initial_block_size(q) == k == math.ceil(0.73 / q - 1e-12)


def test_initial_block_size_domain():
    with pytest.raises(ValueError):
        initial_block_size(0.0)


def test_error_free_leak_is_top_level_parities():
    n = 1000
    a = np.random.default_rng(1).integers(0, 2, n, dtype=np.uint8)
    r = run_cascade(a, a, 0.0129)
    expect = sum(math.ceil(n / min(n, 57 << i)) for i in range(8))
    assert r.flips == 0 and r.leak_bits == expect
    assert np.array_equal(r.corrected_key, a)
    # qber below the floor is clamped
    assert run_cascade(a, a, 1e-6).leak_bits == sum(math.ceil(n / min(n, initial_block_size(QBER_FLOOR) << i)) for i in range(8))


def test_single_error_example():
    a, b = bits("10110100"), bits("10100100")
    assert cascade_first_pass_flip(a.tolist(), b.tolist(), 3) == 3
    r = run_cascade(a, b, 0.25)
    assert r.corrected_key.tolist() == a.tolist()
    assert r.flips == 1
    assert np.flatnonzero(r.corrected_key != b).tolist() == [3]


def test_does_not_modify_inputs(rng):
    a, b = noisy_pair(rng, 5000, 0.03)
    a0, b0 = a.copy(), b.copy()
    run_cascade(a, b, 0.03)
    assert np.array_equal(a, a0) and np.array_equal(b, b0)


def test_leak_matches_transcript_parities(rng):
    a, b = noisy_pair(rng, 20_000, 0.02)
    ch = ClassicalChannel()
    r = run_cascade(a, b, 0.02, channel=ch)
    assert r.leak_bits == sum(m.bitlen for m in ch.transcript if m.kind == "parity")
    assert r.leak_bits >= math.ceil(20_000 / initial_block_size(0.02))


def test_argument_errors():
    with pytest.raises(ValueError):
        run_cascade(bits("101"), bits("10"), 0.1)
    with pytest.raises(ValueError):
        run_cascade(bits("101"), bits("101"), 0.1, iterations=0)


@pytest.mark.slow
def test_residual_errors_rare_at_ts_po_qber():
    """10^5-bit keys at 1.29 %: no residual errors in at least 999 of 1000 runs."""
    rng = np.random.default_rng(2024)
    bad = 0
    for t in range(1000):
        a, b = noisy_pair(rng, 100_000, 0.0129)
        r = run_cascade(a, b, 0.0129, perm_seed=t)
        bad += not np.array_equal(r.corrected_key, a)
    assert bad <= 1


def test_fec_efficiency():
    q = 0.0129
    assert fec_efficiency(1e6 * binary_entropy(q), 10**6, q) == pytest.approx(1.0)
    assert fec_efficiency(229_100, 1_800_000, q) == pytest.approx(1.28, abs=0.01)
    leak = 1.25 * 1.2e6 * binary_entropy(0.0082)
    assert fec_efficiency(leak, 1_200_000, 0.0082) == pytest.approx(1.25)
    for args in ((1, 0, 0.1), (1, 10, 0.0), (1, 10, 0.5)):
        with pytest.raises(ValueError):
            fec_efficiency(*args)


def test_verify_cost_and_identity(rng):
    k = rng.integers(0, 2, 500, dtype=np.uint8)
    assert verify(k, k, 1e-12) == (True, 40)
    assert verify_hash_bits(0.5) == 1
    assert verify(k, k, 0.5)[1] == 1
    with pytest.raises(ValueError):
        verify(k, k[:-1], 1e-12)


def test_verify_false_accept_rate_16_bits():
    rng = np.random.default_rng(77)
    a = rng.integers(0, 2, 128, dtype=np.uint8)
    b = a.copy()
    b[37] ^= 1
    trials = 100_000
    accepted = sum(verify(a, b, 1e-12, seed=s, hash_bits=16)[0] for s in range(trials))
    assert abs(accepted / trials - 2**-16) <= 5e-5


def test_cascade_plus_verify_never_accepts_mismatch():
    rng = np.random.default_rng(3)
    for t in range(1000):
        q = rng.uniform(0.005, 0.03)
        a, b = noisy_pair(rng, 2000, q)
        r = run_cascade(a, b, q, perm_seed=t)
        ok, _ = verify(a, r.corrected_key, 1e-12, seed=t)
        assert not ok or np.array_equal(r.corrected_key, a)
