"""Two-party block session: sift, reconcile, verify, amplify, with leak accounting."""

from __future__ import annotations

import hashlib
import logging
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from qkdnet.cascade import ReconciliationResult, run_cascade, verify
from qkdnet.channel import (
    A_TO_B,
    B_TO_A,
    ClassicalChannel,
    Message,
    decode_frame,
    encode_frame,
    unpack_bits,
)
from qkdnet.core import KeyMaterial, ProtocolParams, SourceParams
from qkdnet.keyrate import (
    BoundsVacuous,
    DecoyCounts,
    KeyLengthBreakdown,
    decoy_bounds,
    key_length,
    overhead_bits,
    skr,
)
from qkdnet.privamp import amplify
from qkdnet.quantum_sim import X, DetectionRecords, PreparedStates, apply_temporal_filter
from qkdnet.sifting import SiftedBlock, match_records, sift

log = logging.getLogger(__name__)

OK = "OK"
VERIFY_FAILED = "VERIFY_FAILED"
BOUNDS_VACUOUS = "BOUNDS_VACUOUS"
ZERO_KEY = "ZERO_KEY"

SIFT_KINDS = ("sift_basis", "sift_keep", "params")


class SeedReuse(RuntimeError):
    pass


def _subseed(seed: int, *tag: int) -> int:
    lo, hi = np.random.SeedSequence([seed, *tag]).generate_state(2, dtype=np.uint32).tolist()
    return lo | hi << 32


@dataclass
class LeakLedger:
    sift_disclosed_bits: int = 0
    ec_disclosed_bits: int = 0
    verify_bits: int = 0
    pa_seed_bits: int = 0

    def as_tuple(self):
        return (self.sift_disclosed_bits, self.ec_disclosed_bits, self.verify_bits, self.pa_seed_bits)


def ledger_from_transcript(transcript) -> LeakLedger:
    led = LeakLedger()
    for m in transcript:
        if m.kind in SIFT_KINDS:
            led.sift_disclosed_bits += m.bitlen
        elif m.kind == "parity":
            led.ec_disclosed_bits += m.bitlen
        elif m.kind == "hash":
            led.verify_bits += m.bitlen
        elif m.kind == "pa_seed":
            led.pa_seed_bits += m.bitlen
    return led


def audit_leak(transcript, ledger: LeakLedger) -> bool:
    """Recount disclosed bits per message kind and compare with ``ledger``."""
    return ledger_from_transcript(transcript).as_tuple() == ledger.as_tuple()


@dataclass
class SessionResult:
    status: str
    stage: str
    key_alice: KeyMaterial | None
    key_bob: KeyMaterial | None
    breakdown: KeyLengthBreakdown | None
    ledger: LeakLedger
    sifted: SiftedBlock | None = None
    reconciliation: ReconciliationResult | None = None
    verified: bool = False
    transcript: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OK


def _sift_exchange(channel, preps: PreparedStates, records: DetectionRecords, n_z_target):
    """Put the sifting disclosures on the channel and compute the sifted block."""
    m = len(records)
    payload = records.slot.astype(">i8").tobytes() + np.packbits(records.basis).tobytes()
    channel.send(Message(B_TO_A, "sift_basis", payload, 64 * m + m))
    block = sift(preps, records, n_z_target)
    rpos, ppos = match_records(preps, records)
    kept = block.n_z + block.n_x
    rpos, ppos = rpos[:kept], ppos[:kept]
    keep = np.zeros(m, dtype=np.uint8)
    keep[rpos] = 1
    channel.send_bits(A_TO_B, "sift_keep", np.concatenate([keep, preps.intensity[ppos]]))
    # Bob discloses his X outcomes for the check-basis error count
    x_out = records.outcome[rpos[records.basis[rpos] == X]]
    channel.send_bits(B_TO_A, "params", x_out)
    return block


def run_block_session(
    alice_data: PreparedStates,
    bob_data: DetectionRecords,
    protocol: ProtocolParams,
    channel: ClassicalChannel | None = None,
    *,
    source: SourceParams | None = None,
    n_z_target: int | None = None,
    qber_est: float = 0.02,
    iterations: int = 8,
    filter_width_s: float | None = None,
    seed: int = 0,
    link_id: str = "",
    epoch: int = 0,
    hash_bits: int | None = None,
    start_slot: int = 0,
    seed_registry: set | None = None,
    tamper=None,
) -> SessionResult:
    """Run the post-processing pipeline for one block.

    ``bob_data`` must be Bob's public view (no dark-count flags).
    Public randomness (permutations, hash and PA seeds) is derived from
    ``(seed, epoch)``.  Pass the same ``seed_registry`` set to all sessions of
    a run to enforce that no privacy-amplification seed is used twice.
    ``tamper``, if given, is applied to Bob's reconciled key before
    verification (fault-injection hook for tests).
    """
    channel = channel if channel is not None else ClassicalChannel()
    source = source or SourceParams()
    ledger = LeakLedger()
    if bob_data.is_dark is not None:
        raise ValueError("post-processing must receive the public record view")
    records = bob_data
    if filter_width_s is not None:
        records, _ = apply_temporal_filter(records, filter_width_s)

    def fail(status, stage, **kw):
        log.info("block %s/%d discarded at %s: %s", link_id, epoch, stage, status)
        return SessionResult(status, stage, None, None, kw.pop("breakdown", None), ledger,
                             transcript=channel.transcript, **kw)

    before = len(channel.transcript)
    block = _sift_exchange(channel, alice_data, records, n_z_target)
    ledger.sift_disclosed_bits = sum(m.bitlen for m in channel.transcript[before:])
    if block.n_z == 0:
        return fail(ZERO_KEY, "sifting", sifted=block)
    # acquisition time runs from the block's first slot to its last sifted Z slot
    block_time = max(block.last_slot + 1 - start_slot, 1) / source.qubit_rate_hz

    rec = run_cascade(
        block.bits_alice, block.bits_bob, qber_est, iterations, channel=channel,
        perm_seed=_subseed(seed, epoch, 0),
    )
    ledger.ec_disclosed_bits = rec.leak_bits
    bob_key = rec.corrected_key
    if tamper is not None:
        bob_key = tamper(bob_key.copy())
    ok, t = verify(block.bits_alice, bob_key, protocol.eps_corr, channel, seed=_subseed(seed, epoch, 1), hash_bits=hash_bits)
    ledger.verify_bits = t
    if not ok:
        return fail(VERIFY_FAILED, "verification", sifted=block, reconciliation=rec)

    # after verification, the positions Bob flipped are the Z errors
    flips = block.bits_bob != bob_key
    m_z = (
        int(np.count_nonzero(flips & (block.intensity_z == 0))),
        int(np.count_nonzero(flips & (block.intensity_z == 1))),
    )
    counts = DecoyCounts.from_sifted(block, m_z)
    try:
        b = decoy_bounds(counts, protocol)
    except BoundsVacuous:
        bd = KeyLengthBreakdown(0.0, 0.0, 0.5, rec.leak_bits, overhead_bits(protocol), 0, block_time, 0.0)
        return fail(BOUNDS_VACUOUS, "parameter_estimation", sifted=block, reconciliation=rec,
                    breakdown=bd, verified=True)
    l = min(key_length(b.s_z0_lower, b.s_z1_lower, b.phi_z_upper, rec.leak_bits, protocol), block.n_z)
    bd = KeyLengthBreakdown(
        b.s_z0_lower, b.s_z1_lower, b.phi_z_upper, rec.leak_bits,
        overhead_bits(protocol), l, block_time, skr(l, block_time),
    )
    if l <= 0:
        return fail(ZERO_KEY, "privacy_amplification", sifted=block, reconciliation=rec,
                    breakdown=bd, verified=True)
    pa_seed = np.random.default_rng(_subseed(seed, epoch, 2)).integers(0, 2, block.n_z + l - 1, dtype=np.uint8)
    if seed_registry is not None:
        digest = hashlib.sha256(np.packbits(pa_seed).tobytes()).digest()
        if digest in seed_registry:
            raise SeedReuse(f"privacy amplification seed reused in block {link_id}/{epoch}")
        seed_registry.add(digest)
    ka, kb = amplify(
        (block.bits_alice, bob_key), l, channel, seed_bits=pa_seed,
        link_id=link_id, epoch=epoch, eps_sec=protocol.eps_sec, eps_corr=protocol.eps_corr,
    )
    ledger.pa_seed_bits = block.n_z + l - 1
    return SessionResult(OK, "done", ka, kb, bd, ledger, block, rec, True, channel.transcript)


class FramedSocket:
    """Length-prefixed message framing over a stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = b""

    def send(self, msg: Message) -> None:
        self.sock.sendall(encode_frame(msg))

    def recv(self) -> Message:
        while True:
            if len(self._buf) >= 4:
                (length,) = struct.unpack(">I", self._buf[:4])
                if len(self._buf) >= 4 + length:
                    msg, self._buf = decode_frame(self._buf)
                    return msg
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self._buf += chunk


class SocketChannel(ClassicalChannel):
    """Channel that also mirrors every message onto a framed socket."""

    def __init__(self, sock: socket.socket, latency_s: float = 0.0):
        super().__init__(latency_s=latency_s)
        self.wire = FramedSocket(sock)

    def send(self, msg: Message) -> Message:
        super().send(msg)
        self.wire.send(msg)
        return msg


def received_bits(msg: Message) -> np.ndarray:
    return unpack_bits(msg.payload, msg.bitlen)
