"""In-order authenticated classical channel with a message transcript."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

A_TO_B = "A>B"
B_TO_A = "B>A"

# one byte per kind on the wire
KINDS = (
    "sift_basis",
    "sift_keep",
    "parity_request",
    "parity",
    "seed",
    "hash",
    "verdict",
    "pa_seed",
    "params",
)
KIND_CODES = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class Message:
    direction: str
    kind: str
    payload: bytes
    bitlen: int

    def dump(self) -> str:
        return f"{self.direction} {self.kind} {self.bitlen} {self.payload.hex()}"

    @classmethod
    def parse(cls, line: str) -> Message:
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"malformed transcript line: {line!r}")
        payload = bytes.fromhex(parts[3]) if len(parts) == 4 else b""
        return cls(parts[0], parts[1], payload, int(parts[2]))


def pack_bits(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(payload: bytes, bitlen: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=bitlen)


def bits_message(direction: str, kind: str, bits) -> Message:
    bits = np.asarray(bits, dtype=np.uint8)
    return Message(direction, kind, pack_bits(bits), int(bits.size))


@dataclass
class ClassicalChannel:
    """Duplex message stream between Alice and Bob.

    Delivery is in order and unmodified; authentication is assumed.  Every
    message is appended to ``transcript``.  ``mac`` is a hook for a future
    authentication tag function ``(Message) -> bytes``; it is not used for
    any security decision here.
    """

    latency_s: float = 0.0
    transcript: list = field(default_factory=list)
    bits_sent: dict = field(default_factory=lambda: {A_TO_B: 0, B_TO_A: 0})
    mac: object = None

    def send(self, msg: Message) -> Message:
        if msg.direction not in (A_TO_B, B_TO_A):
            raise ValueError(f"bad direction {msg.direction!r}")
        if msg.kind not in KIND_CODES:
            raise ValueError(f"unknown message kind {msg.kind!r}")
        if self.latency_s:
            time.sleep(self.latency_s)
        self.transcript.append(msg)
        self.bits_sent[msg.direction] += msg.bitlen
        return msg

    def send_bits(self, direction: str, kind: str, bits) -> Message:
        return self.send(bits_message(direction, kind, bits))

    def send_bytes(self, direction: str, kind: str, payload: bytes) -> Message:
        return self.send(Message(direction, kind, payload, 8 * len(payload)))

    def dump(self) -> str:
        return "".join(m.dump() + "\n" for m in self.transcript)


def parse_transcript(text: str) -> list[Message]:
    return [Message.parse(line) for line in text.splitlines() if line.strip()]


# wire framing: 4-byte big-endian length of (kind byte + body), kind byte, body.
# body = 1 direction byte + 4-byte bitlen + payload
def encode_frame(msg: Message) -> bytes:
    body = bytes([0 if msg.direction == A_TO_B else 1]) + struct.pack(">I", msg.bitlen) + msg.payload
    return struct.pack(">I", len(body) + 1) + bytes([KIND_CODES[msg.kind]]) + body


def decode_frame(buf: bytes) -> tuple[Message, bytes]:
    """Decode one frame from the front of ``buf``; returns (message, rest)."""
    if len(buf) < 4:
        raise ValueError("incomplete frame header")
    (length,) = struct.unpack(">I", buf[:4])
    if len(buf) < 4 + length:
        raise ValueError("incomplete frame")
    frame, rest = buf[4 : 4 + length], buf[4 + length :]
    kind = KINDS[frame[0]]
    direction = A_TO_B if frame[1] == 0 else B_TO_A
    (bitlen,) = struct.unpack(">I", frame[2:6])
    return Message(direction, kind, frame[6:], bitlen), rest
