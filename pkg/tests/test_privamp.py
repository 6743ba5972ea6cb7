import itertools
import time
import tracemalloc

import numpy as np
import pytest

import qkdnet.privamp as pa
from qkdnet.channel import ClassicalChannel
from qkdnet.core import FRESH
from qkdnet.privamp import NoSecureKey, ToeplitzSpec, amplify, toeplitz_dense, toeplitz_stream

from oracles import toeplitz_loops


def bits(s):
    return np.array([int(c) for c in s], dtype=np.uint8)


def identity_seed(n):
    seed = np.zeros(2 * n - 1, dtype=np.uint8)
    seed[n - 1] = 1
    return seed


def test_worked_example():
    spec = ToeplitzSpec(5, 3, bits("1011010"))
    key = bits("10110")
    assert toeplitz_loops(5, 3, spec.seed.tolist(), key.tolist()) == [0, 1, 1]
    assert toeplitz_dense(spec, key).tolist() == [0, 1, 1]
    assert toeplitz_stream(spec, key).tolist() == [0, 1, 1]


def test_zero_seed_and_identity(rng):
    key = rng.integers(0, 2, 40, dtype=np.uint8)
    assert not toeplitz_stream(ToeplitzSpec(40, 20, np.zeros(59, np.uint8)), key).any()
    spec = ToeplitzSpec(40, 40, identity_seed(40))
    assert np.array_equal(toeplitz_dense(spec, key), key)
    assert np.array_equal(toeplitz_stream(spec, key), key)


def test_single_row_is_seed_selected_parity(rng):
    key = rng.integers(0, 2, 30, dtype=np.uint8)
    seed = rng.integers(0, 2, 30, dtype=np.uint8)
    assert toeplitz_stream(ToeplitzSpec(30, 1, seed), key)[0] == int(seed @ key) % 2


def test_spec_validation():
    with pytest.raises(ValueError):
        ToeplitzSpec(5, 6, np.zeros(10))
    with pytest.raises(ValueError):
        ToeplitzSpec(5, 3, np.zeros(6))
    with pytest.raises(ValueError):
        toeplitz_stream(ToeplitzSpec(5, 3, np.zeros(7)), np.zeros(4))


def test_stream_equals_dense_random():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n = int(rng.integers(1, 2**12 + 1))
        l = int(rng.integers(1, n + 1))
        spec = ToeplitzSpec.random(n, l, rng)
        key = rng.integers(0, 2, n, dtype=np.uint8)
        assert np.array_equal(toeplitz_stream(spec, key), toeplitz_dense(spec, key))


def test_stream_chunk_boundaries(monkeypatch):
    monkeypatch.setattr(pa, "STREAM_CHUNK", 37)
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(65, 600))
        l = int(rng.integers(65, n + 1))
        spec = ToeplitzSpec.random(n, l, rng)
        key = rng.integers(0, 2, n, dtype=np.uint8)
        assert np.array_equal(toeplitz_stream(spec, key), toeplitz_dense(spec, key))


def test_exhaustive_small_keys():
    rng = np.random.default_rng(6)
    for n in range(1, 11):
        for l in range(1, n + 1):
            spec = ToeplitzSpec.random(n, l, rng)
            keys = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.uint8)
            dense = (keys @ np.array([[spec.seed[j - i + l - 1] for i in range(l)] for j in range(n)])) % 2
            for key, want in zip(keys, dense):
                assert np.array_equal(toeplitz_stream(spec, key), want)


def test_linearity():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        n = int(rng.integers(1, 3000))
        l = int(rng.integers(1, n + 1))
        spec = ToeplitzSpec.random(n, l, rng)
        k1, k2 = rng.integers(0, 2, (2, n), dtype=np.uint8)
        assert np.array_equal(toeplitz_stream(spec, k1 ^ k2), toeplitz_stream(spec, k1) ^ toeplitz_stream(spec, k2))


def test_large_stream_memory_and_throughput():
    n, l = 2_000_000, 1_000_000
    rng = np.random.default_rng(10)
    spec = ToeplitzSpec.random(n, l, rng)
    key = rng.integers(0, 2, n, dtype=np.uint8)
    tracemalloc.start()
    t0 = time.perf_counter()
    out = toeplitz_stream(spec, key)
    dt = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert out.size == l
    # the dense matrix would need l*n bytes (2e12); stay within O(n + l)
    assert peak < 64 * (n + l)
    assert n / dt >= 1e6
    # spot-check rows against the definition
    for i in (0, 1, l // 2, l - 1):
        r = l - 1 - i
        assert out[i] == int(spec.seed[r:r + n].astype(np.int64) @ key) % 2


def test_amplify_both_sides_and_seed_message(rng):
    key = rng.integers(0, 2, 2048, dtype=np.uint8)
    ch = ClassicalChannel()
    ka, kb = amplify(key, 1024, ch, seed=4, link_id="TS-PO", epoch=2)
    assert ka.same_bits(kb) and ka.length_bits == 1024 and ka.status == FRESH
    seed_msg = [m for m in ch.transcript if m.kind == "pa_seed"]
    assert len(seed_msg) == 1 and seed_msg[0].bitlen == 2048 + 1024 - 1
    from qkdnet.channel import unpack_bits

    seed = unpack_bits(seed_msg[0].payload, seed_msg[0].bitlen)
    assert np.array_equal(ka.bits, toeplitz_dense(ToeplitzSpec(2048, 1024, seed), key))


def test_amplify_identity_and_errors(rng):
    key = rng.integers(0, 2, 64, dtype=np.uint8)
    ka, _ = amplify(key, 64, seed_bits=identity_seed(64))
    assert np.array_equal(ka.bits, key)
    with pytest.raises(NoSecureKey):
        amplify(key, 0)
    with pytest.raises(ValueError):
        amplify(key, 65)
