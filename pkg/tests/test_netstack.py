import socket
import threading
from dataclasses import replace

import numpy as np
import pytest

from qkdnet.channel import A_TO_B, B_TO_A, ClassicalChannel, Message, bits_message, decode_frame, encode_frame, parse_transcript
from qkdnet.core import binary_entropy
from qkdnet.netstack import (
    BOUNDS_VACUOUS,
    OK,
    VERIFY_FAILED,
    ZERO_KEY,
    FramedSocket,
    LeakLedger,
    SeedReuse,
    SocketChannel,
    audit_leak,
    run_block_session,
)
from qkdnet.quantum_sim import sample_detections


def session_inputs(lk, n_z, seed, link_params=None, qi=None):
    link = link_params or lk.link_params
    qi = lk.qber_z_intrinsic if qi is None else qi
    from qkdnet.quantum_sim import sifted_z_rate

    n_slots = int(1.1 * n_z / sifted_z_rate(link, lk.protocol_params, lk.source_params, qi) * lk.source_params.qubit_rate_hz)
    st, rec = sample_detections(n_slots, link, lk.protocol_params, lk.source_params, seed, qi)
    return st, rec.public(), link


def run(lk, n_z=100_000, seed=1, link_params=None, qi=None, **kw):
    st, rec, link = session_inputs(lk, n_z, seed, link_params, qi)
    kw.setdefault("qber_est", lk.targets["qber_z"])
    return run_block_session(st, rec, lk.protocol_params, source=lk.source_params, n_z_target=n_z,
                             filter_width_s=link.filter_width_s, seed=seed, link_id=lk.id, **kw)


def test_message_dump_parse_and_frames():
    m = bits_message(A_TO_B, "parity", [1, 0, 1])
    assert m.dump() == "A>B parity 3 a0"
    assert Message.parse(m.dump()) == m
    ch = ClassicalChannel()
    ch.send(m)
    ch.send_bytes(B_TO_A, "seed", b"\x01\x02")
    assert parse_transcript(ch.dump()) == ch.transcript
    assert ch.bits_sent == {A_TO_B: 3, B_TO_A: 16}
    frame = encode_frame(m)
    assert frame[:4] == (len(frame) - 4).to_bytes(4, "big")
    got, rest = decode_frame(frame + b"xyz")
    assert got == m and rest == b"xyz"
    with pytest.raises(ValueError):
        ch.send(Message(A_TO_B, "gossip", b"", 0))


def test_error_free_block(preset):
    lk = preset.link("TS-PO")
    clean = replace(lk.link_params, dark_rate_hz=0.0, visibility_x=1.0)
    r = run(lk, n_z=100_000, link_params=clean, qi=0.0, qber_est=0.01)
    assert r.status == OK and r.verified
    assert r.key_alice.same_bits(r.key_bob)
    assert r.reconciliation.flips == 0 and r.reconciliation.qber_estimate == 0.0
    assert audit_leak(r.transcript, r.ledger)


def test_ts_po_desk_block_leak_and_audit(preset):
    lk = preset.link("TS-PO")
    r = run(lk, n_z=100_000, seed=2)
    b = r.sifted
    assert r.verified and r.status in (OK, ZERO_KEY, BOUNDS_VACUOUS)
    assert r.ledger.ec_disclosed_bits == r.reconciliation.leak_bits
    ratio = r.ledger.ec_disclosed_bits / (b.n_z * binary_entropy(b.qber_z_observed))
    assert 1.1 <= ratio <= 1.45
    assert audit_leak(r.transcript, r.ledger)


def test_ts_po_desk_block_yields_key(preset):
    """Desk-scale TS-PO block (n_Z = 1e5): keys equal and l > 0."""
    r = run(preset.link("TS-PO"), n_z=100_000, seed=2)
    assert r.status == OK
    assert r.key_alice.same_bits(r.key_bob)
    assert r.breakdown.l_secret > 0


def test_full_size_block_ledger(preset):
    lk = preset.link("LJ-PO")
    r = run(lk, n_z=lk.n_z_full, seed=3)
    assert r.status == OK and r.key_alice.same_bits(r.key_bob)
    assert r.ledger.pa_seed_bits == r.sifted.n_z + r.breakdown.l_secret - 1
    assert r.ledger.verify_bits == 40
    assert audit_leak(r.transcript, r.ledger)


def _flip_one(key):
    key[len(key) // 3] ^= 1
    return key


def test_tampered_key_rejected(preset):
    lk = preset.link("TS-PO")
    st, rec, link = session_inputs(lk, 4000, 9)
    common = dict(source=lk.source_params, n_z_target=4000, qber_est=0.013, filter_width_s=link.filter_width_s)
    for s in range(30):
        r = run_block_session(st, rec, lk.protocol_params, seed=s, tamper=_flip_one, **common)
        assert r.status == VERIFY_FAILED and r.stage == "verification" and r.key_alice is None
    # scaled 8-bit hash: false accepts occur at rate 2^-8
    trials = 3000
    rejected = sum(
        run_block_session(st, rec, lk.protocol_params, seed=s, tamper=_flip_one, hash_bits=8, **common).status
        == VERIFY_FAILED
        for s in range(trials)
    )
    p = 2**-8
    assert abs((trials - rejected) / trials - p) <= 3 * np.sqrt(p * (1 - p) / trials)


def test_audit_detects_mutation(preset):
    assert audit_leak([], LeakLedger())
    r = run(preset.link("TS-PO"), n_z=20_000, seed=4)
    assert audit_leak(r.transcript, r.ledger)
    forged = list(r.transcript) + [bits_message(A_TO_B, "parity", [1])]
    assert not audit_leak(forged, r.ledger)


def test_deterministic_and_fresh_pa_seeds(preset):
    lk = preset.link("LJ-PO")
    st, rec, link = session_inputs(lk, 600_000, 5)
    common = dict(source=lk.source_params, n_z_target=600_000, qber_est=0.008, filter_width_s=link.filter_width_s)
    r1 = run_block_session(st, rec, lk.protocol_params, seed=5, **common)
    r2 = run_block_session(st, rec, lk.protocol_params, seed=5, **common)
    assert r1.status == OK and r1.key_alice.same_bits(r2.key_alice)
    registry = set()
    for epoch in range(2):
        run_block_session(st, rec, lk.protocol_params, seed=5, epoch=epoch, seed_registry=registry, **common)
    assert len(registry) == 2
    with pytest.raises(SeedReuse):
        run_block_session(st, rec, lk.protocol_params, seed=5, epoch=0, seed_registry=registry, **common)


def test_rejects_private_simulator_fields(preset):
    lk = preset.link("TS-PO")
    st, rec = sample_detections(10**7, lk.link_params, lk.protocol_params, lk.source_params, 1)
    with pytest.raises(ValueError):
        run_block_session(st, rec, lk.protocol_params)


def test_socket_transport_mirrors_transcript(preset):
    lk = preset.link("TS-PO")
    st, rec, link = session_inputs(lk, 5000, 6)
    a, b = socket.socketpair()
    received = []

    def reader():
        fs = FramedSocket(b)
        try:
            while True:
                received.append(fs.recv())
        except ConnectionError:
            pass

    t = threading.Thread(target=reader)
    t.start()
    ch = SocketChannel(a)
    r = run_block_session(st, rec, lk.protocol_params, ch, source=lk.source_params, n_z_target=5000,
                          qber_est=0.013, filter_width_s=link.filter_width_s)
    a.shutdown(socket.SHUT_WR)
    t.join(10)
    a.close()
    b.close()
    assert received == ch.transcript and len(received) > 10
    assert audit_leak(received, r.ledger)
