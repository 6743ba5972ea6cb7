"""Key management layer: per-peer key stores, trusted-node relay, block export.

A :class:`KeyStore` holds, for every (local node, peer) pair, a queue of
fresh :class:`~qkdnet.core.KeyMaterial` ordered by epoch.  Handing out key
moves bits out of the fresh queue into a reserved state, and an
acknowledgement marks them consumed.  Every range ever handed out is
recorded so that reuse can be audited, and, when a store file is given,
appended to it so a restart cannot hand the same bits out again.
"""

from __future__ import annotations

import base64
import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qkdnet.core import CONSUMED, FRESH, RESERVED, KeyMaterial

log = logging.getLogger(__name__)

KEY_UNAVAILABLE = "KEY_UNAVAILABLE"
EXPORT_MAGIC = b"QKDK1"
VPN_BLOCK_BITS = 2048


class InsufficientMaterial(RuntimeError):
    pass


class RelayError(ValueError):
    pass


@dataclass(frozen=True)
class KeyUnavailable:
    """Explicit no-key result; falsy so callers can write ``if not key``."""

    local: str
    peer: str
    size_bits: int
    status: str = KEY_UNAVAILABLE

    def __bool__(self):
        return False


@dataclass(frozen=True)
class GenerationRequest:
    local: str
    peer: str
    size_bits: int


def key_id(m: KeyMaterial) -> str:
    return f"{m.link_id}:{m.epoch}:{m.offset}:{m.length_bits}"


@dataclass(frozen=True)
class IssuedRange:
    local: str
    peer: str
    link_id: str
    epoch: int
    start: int
    stop: int


def ranges_disjoint(ranges) -> bool:
    """True iff no two ranges of the same node/link/epoch overlap."""
    by_owner: dict = {}
    for r in ranges:
        by_owner.setdefault((r.local, r.link_id, r.epoch), []).append((r.start, r.stop))
    for spans in by_owner.values():
        spans.sort()
        for (_, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                return False
    return True


class KeyStore:
    """Thread-safe multi-node key store.

    One instance may hold the queues of several nodes (a simulated network)
    or of a single node.  All public methods are linearizable.
    """

    def __init__(self, path=None, on_generation_request=None):
        self._lock = threading.RLock()
        self._fresh: dict[tuple[str, str], list[KeyMaterial]] = {}
        self._reserved: dict[tuple[str, str], dict[str, KeyMaterial]] = {}
        self._issued: list[IssuedRange] = []
        self._consumed: list[IssuedRange] = []
        self.generation_requests: list[GenerationRequest] = []
        self._callback = on_generation_request
        self._path = Path(path) if path is not None else None
        self._replaying = False
        if self._path is not None and self._path.exists():
            self._replay()

    # persistence

    def _append(self, rec: dict) -> None:
        if self._path is None or self._replaying:
            return
        with self._path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    def _replay(self) -> None:
        self._replaying = True
        try:
            for lineno, line in enumerate(self._path.read_text().splitlines(), 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                op = rec["op"]
                if op == "deposit":
                    bits = np.unpackbits(np.frombuffer(bytes.fromhex(rec["bits"]), np.uint8), count=rec["n"])
                    self.deposit(rec["local"], rec["peer"], KeyMaterial(
                        bits, rec["link_id"], rec["epoch"], rec["eps_sec"], rec["eps_corr"], offset=rec["offset"]))
                elif op == "take":
                    self._take_exact(rec["local"], rec["peer"], rec["link_id"], rec["epoch"], rec["offset"], rec["n"])
                elif op == "ack":
                    self.acknowledge(rec["local"], rec["peer"], rec["key_id"])
                else:
                    raise ValueError(f"{self._path}:{lineno}: unknown op {op!r}")
        finally:
            self._replaying = False

    # queue operations

    def deposit(self, local: str, peer: str, material: KeyMaterial) -> None:
        """Add fresh material shared by ``local`` and ``peer``."""
        if material.status != FRESH:
            raise ValueError("only fresh material can be deposited")
        with self._lock:
            q = self._fresh.setdefault((local, peer), [])
            q.append(material)
            q.sort(key=lambda m: (m.epoch, m.offset))
            self._append({
                "op": "deposit", "local": local, "peer": peer, "link_id": material.link_id,
                "epoch": material.epoch, "offset": material.offset, "n": material.length_bits,
                "eps_sec": material.eps_sec, "eps_corr": material.eps_corr,
                "bits": np.packbits(material.bits).tobytes().hex(),
            })

    def deposit_pair(self, a: str, b: str, key_a: KeyMaterial, key_b: KeyMaterial) -> None:
        if not key_a.same_bits(key_b):
            raise ValueError("endpoint keys differ")
        with self._lock:
            self.deposit(a, b, key_a)
            self.deposit(b, a, key_b)

    def fresh_bits(self, local: str, peer: str) -> int:
        with self._lock:
            return sum(m.length_bits for m in self._fresh.get((local, peer), []))

    def _take(self, local, peer, idx, n, status) -> KeyMaterial:
        q = self._fresh[(local, peer)]
        m = q[idx]
        if n == m.length_bits:
            head = q.pop(idx)
        else:
            head, q[idx] = m.split(n)
        head = head.with_status(status)
        r = IssuedRange(local, peer, head.link_id, head.epoch, head.offset, head.offset + n)
        self._issued.append(r)
        if status == CONSUMED:
            self._consumed.append(r)
        else:
            self._reserved.setdefault((local, peer), {})[key_id(head)] = head
        self._append({"op": "take", "local": local, "peer": peer, "link_id": head.link_id,
                      "epoch": head.epoch, "offset": head.offset, "n": n})
        if status == CONSUMED:
            self._append({"op": "ack", "local": local, "peer": peer, "key_id": key_id(head)})
        return head

    def _take_exact(self, local, peer, link_id, epoch, offset, n) -> KeyMaterial:
        q = self._fresh.get((local, peer), [])
        for i, m in enumerate(q):
            if m.link_id == link_id and m.epoch == epoch and m.offset == offset:
                return self._take(local, peer, i, n, RESERVED)
        raise ValueError(f"store file inconsistent: no fresh {link_id}/{epoch} at {offset}")

    def request_key(self, local: str, peer: str, size_bits: int):
        """Reserve ``size_bits`` from the oldest fresh block that is large enough.

        Returns the reserved material, or :class:`KeyUnavailable` after
        recording a generation request.
        """
        if size_bits <= 0:
            raise ValueError("size_bits must be positive")
        with self._lock:
            q = self._fresh.get((local, peer), [])
            for i, m in enumerate(q):
                if m.length_bits >= size_bits:
                    return self._take(local, peer, i, size_bits, RESERVED)
            req = GenerationRequest(local, peer, size_bits)
            self.generation_requests.append(req)
        log.info("%s: no %d-bit key for %s->%s, requesting generation", KEY_UNAVAILABLE, size_bits, local, peer)
        if self._callback is not None:
            self._callback(req)
        return KeyUnavailable(local, peer, size_bits)

    def acknowledge(self, local: str, peer: str, kid: str) -> KeyMaterial:
        """Mark a reserved key as consumed."""
        with self._lock:
            res = self._reserved.get((local, peer), {})
            if kid not in res:
                raise KeyError(f"no reserved key {kid} for {local}->{peer}")
            m = res.pop(kid).with_status(CONSUMED)
            self._consumed.append(IssuedRange(local, peer, m.link_id, m.epoch, m.offset, m.offset + m.length_bits))
            self._append({"op": "ack", "local": local, "peer": peer, "key_id": kid})
            return m

    def reserved(self, local: str, peer: str) -> dict[str, KeyMaterial]:
        with self._lock:
            return dict(self._reserved.get((local, peer), {}))

    def issued_ranges(self) -> list[IssuedRange]:
        with self._lock:
            return list(self._issued)

    def consumed_ranges(self) -> list[IssuedRange]:
        with self._lock:
            return list(self._consumed)

    def audit_no_reuse(self) -> bool:
        return ranges_disjoint(self.issued_ranges())

    # relay and export

    def relay_key(self, path: list[str], target_len: int, key=None) -> RelayResult:
        """Trusted-node relay of a key between ``path[0]`` and ``path[-1]``.

        Both copies of every hop key are reserved before anything is
        consumed, so a shortage on any hop leaves the store untouched.
        """
        if len(path) < 2:
            raise RelayError("a relay path needs at least two nodes")
        if len(set(path)) != len(path):
            raise RelayError(f"path repeats a node: {path}")
        if target_len <= 0:
            raise RelayError("target_len must be positive")
        hops = list(zip(path, path[1:]))
        with self._lock:
            for a, b in hops:
                for u, v in ((a, b), (b, a)):
                    if not any(m.length_bits >= target_len for m in self._fresh.get((u, v), [])):
                        raise InsufficientMaterial(f"hop {u}->{v} lacks {target_len} fresh bits")
            pairs = []
            for a, b in hops:
                ka = self.request_key(a, b, target_len)
                kb = self.request_key(b, a, target_len)
                pairs.append((ka, kb))
            result = relay_chain(path, pairs, key)
            for (a, b), (ka, kb) in zip(hops, pairs):
                self.acknowledge(a, b, key_id(ka))
                self.acknowledge(b, a, key_id(kb))
        return result

    def export_key_blocks(self, local: str, peer: str, block_bits: int = VPN_BLOCK_BITS) -> list[bytes]:
        """Export all full blocks of the oldest fresh material; the tail stays fresh."""
        if block_bits <= 0:
            raise ValueError("block_bits must be positive")
        with self._lock:
            q = self._fresh.get((local, peer), [])
            if not q:
                return []
            nfull = q[0].length_bits // block_bits
            out = []
            for _ in range(nfull):
                m = self._take(local, peer, 0, block_bits, CONSUMED)
                out.append(encode_block(m))
            return out


@dataclass(frozen=True)
class RelayResult:
    path: tuple[str, ...]
    key_initiator: KeyMaterial
    key_responder: KeyMaterial
    ciphertexts: tuple[np.ndarray, ...] = field(repr=False)
    hop_keys: tuple[str, ...] = ()


def relay_chain(path, hop_pairs, key=None) -> RelayResult:
    """One-time-pad relay over hop keys.

    ``hop_pairs[i]`` holds the two copies of the key of hop
    ``path[i] -> path[i+1]``.  Without an explicit ``key`` the initiator's
    first hop key is relayed, so a single hop yields the link key itself.
    Each intermediate node decrypts with its incoming copy and re-encrypts
    with its outgoing copy; the ciphertexts are public.
    """
    n = hop_pairs[0][0].length_bits
    for ka, kb in hop_pairs:
        if ka.length_bits != n or kb.length_bits != n:
            raise RelayError("hop keys must all have the relay length")
    first = hop_pairs[0][0]
    k = first.bits.copy() if key is None else np.asarray(key, dtype=np.uint8)
    if k.size != n:
        raise RelayError(f"relayed key has {k.size} bits, expected {n}")
    cts = []
    ct = k ^ first.bits
    cts.append(ct)
    for i in range(1, len(hop_pairs)):
        # node path[i] holds hop_pairs[i-1][1] (incoming) and hop_pairs[i][0] (outgoing)
        inner = ct ^ hop_pairs[i - 1][1].bits
        ct = inner ^ hop_pairs[i][0].bits
        cts.append(ct)
    k_end = ct ^ hop_pairs[-1][1].bits
    relay_id = f"{path[0]}~{path[-1]}"
    epoch = max(p[0].epoch for p in hop_pairs)
    meta = dict(link_id=relay_id, epoch=epoch, eps_sec=sum(p[0].eps_sec for p in hop_pairs),
                eps_corr=sum(p[0].eps_corr for p in hop_pairs))
    return RelayResult(
        tuple(path), KeyMaterial(k, **meta), KeyMaterial(k_end, **meta), tuple(cts),
        tuple(key_id(p[0]) for p in hop_pairs),
    )


def export_key_blocks(material: KeyMaterial, block_bits: int = VPN_BLOCK_BITS):
    """Split ``material`` into full blocks; returns (blocks, fresh remainder or None)."""
    if block_bits <= 0:
        raise ValueError("block_bits must be positive")
    blocks = []
    rest = material
    while rest is not None and rest.length_bits >= block_bits:
        if rest.length_bits == block_bits:
            head, rest = rest, None
        else:
            head, rest = rest.split(block_bits)
        blocks.append(encode_block(head.with_status(CONSUMED)))
    return blocks, rest


def encode_block(m: KeyMaterial) -> bytes:
    lid = m.link_id.encode("utf-8")
    return (
        EXPORT_MAGIC
        + struct.pack(">H", len(lid)) + lid
        + struct.pack(">QI", m.epoch, m.length_bits)
        + np.packbits(m.bits).tobytes()
    )


def decode_block(data: bytes) -> KeyMaterial:
    if data[:5] != EXPORT_MAGIC:
        raise ValueError("not a QKDK1 key block")
    (ln,) = struct.unpack_from(">H", data, 5)
    pos = 7 + ln
    link_id = data[7:pos].decode("utf-8")
    epoch, nbits = struct.unpack_from(">QI", data, pos)
    raw = data[pos + 12:]
    if len(raw) != -(-nbits // 8):
        raise ValueError(f"block body has {len(raw)} bytes, expected {-(-nbits // 8)}")
    bits = np.unpackbits(np.frombuffer(raw, np.uint8), count=nbits)
    return KeyMaterial(bits, link_id, epoch)


# REST demo (single node, no authentication)


def make_rest_server(store: KeyStore, node: str, host: str = "127.0.0.1", port: int = 0):
    """HTTP key delivery for demos: GET a key for a peer, POST an ack."""
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
    from urllib.parse import parse_qs, urlparse

    class Handler(BaseHTTPRequestHandler):
        def _reply(self, code, obj):
            body = json.dumps(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            u = urlparse(self.path)
            parts = u.path.strip("/").split("/")
            if len(parts) != 4 or parts[:3] != ["api", "v1", "keys"]:
                return self._reply(404, {"error": "not found"})
            try:
                size = int(parse_qs(u.query).get("size", [str(VPN_BLOCK_BITS)])[0])
                got = store.request_key(node, parts[3], size)
            except ValueError as e:
                return self._reply(400, {"error": str(e)})
            if not got:
                return self._reply(503, {"status": KEY_UNAVAILABLE})
            self._reply(200, {"key_id": key_id(got), "key_b64": base64.b64encode(np.packbits(got.bits).tobytes()).decode()})

        def do_POST(self):
            parts = urlparse(self.path).path.strip("/").split("/")
            if len(parts) != 6 or parts[:3] != ["api", "v1", "keys"] or parts[5] != "ack":
                return self._reply(404, {"error": "not found"})
            try:
                store.acknowledge(node, parts[3], parts[4])
            except KeyError as e:
                return self._reply(404, {"error": str(e)})
            self._reply(200, {"status": CONSUMED})

        def log_message(self, fmt, *args):
            log.debug("rest: " + fmt, *args)

    return ThreadingHTTPServer((host, port), Handler)
