"""Shared value types and closed-form helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

FRESH = "fresh"
RESERVED = "reserved"
CONSUMED = "consumed"
_STATUS_ORDER = {FRESH: 0, RESERVED: 1, CONSUMED: 2}


@dataclass(frozen=True)
class ProtocolParams:
    """Decoy intensities, basis/intensity probabilities and security parameters."""

    mu1: float = 0.24
    mu2: float = 0.11
    p_mu1: float = 0.7
    p_za: float = 0.9048
    eps_sec: float = 1e-9
    eps_corr: float = 1e-12

    def __post_init__(self):
        if not 0 < self.mu2 < self.mu1 <= 1:
            raise ValueError(f"need 0 < mu2 < mu1 <= 1, got mu1={self.mu1}, mu2={self.mu2}")
        if not 0 < self.p_za < 1:
            raise ValueError(f"p_za must be in (0, 1), got {self.p_za}")
        if not 0 < self.p_mu1 < 1:
            raise ValueError(f"p_mu1 must be in (0, 1), got {self.p_mu1}")
        for name in ("eps_sec", "eps_corr"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must be in (0, 1), got {v}")

    @property
    def p_xa(self) -> float:
        return 1.0 - self.p_za

    @property
    def p_mu2(self) -> float:
        return 1.0 - self.p_mu1


@dataclass(frozen=True)
class LinkParams:
    """Channel and receiver parameters of one link."""

    channel_att_db: float = 14.0
    loss_z_db: float = 1.4
    loss_x_db: float = 8.6
    visibility_x: float = 0.9
    det_efficiency: float = 0.2
    dark_rate_hz: float = 2500.0
    holdoff_s: float = 20e-6
    filter_width_s: float = 100e-12
    jitter_rms_s: float = 100e-12

    def __post_init__(self):
        for name in ("channel_att_db", "loss_z_db", "loss_x_db"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("visibility_x", "det_efficiency"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("dark_rate_hz", "holdoff_s", "filter_width_s", "jitter_rms_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def transmittance(self, basis: str) -> float:
        """Overall detection probability factor for a photon routed to ``basis``."""
        loss = self.loss_z_db if basis == "Z" else self.loss_x_db
        return (
            db_to_transmittance(self.channel_att_db)
            * db_to_transmittance(loss)
            * self.det_efficiency
        )


@dataclass(frozen=True)
class SourceParams:
    qubit_rate_hz: float = 595e6
    bin_separation_s: float = 800e-12
    sync_rate_hz: float = 145.358e3
    prbs_length: int = 2**12 - 1

    def __post_init__(self):
        if self.qubit_rate_hz <= 0:
            raise ValueError("qubit_rate_hz must be > 0")
        if self.bin_separation_s <= 0:
            raise ValueError("bin_separation_s must be > 0")
        if self.bin_separation_s >= 1.0 / self.qubit_rate_hz:
            raise ValueError("bin_separation_s must be shorter than the slot period")

    @property
    def slot_period_s(self) -> float:
        return 1.0 / self.qubit_rate_hz


@dataclass(frozen=True)
class KeyMaterial:
    """A finished key block together with where it came from.

    ``offset`` is the position of the first bit inside the original block
    of the same ``link_id``/``epoch``; splitting keeps it so consumed ranges
    can be audited for overlap.
    """

    bits: np.ndarray = field(repr=False)
    link_id: str
    epoch: int
    eps_sec: float = 1e-9
    eps_corr: float = 1e-12
    status: str = FRESH
    offset: int = 0

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1:
            raise ValueError("bits must be one-dimensional")
        if bits.size and bits.max() > 1:
            raise ValueError("bits must be 0/1")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        if self.status not in _STATUS_ORDER:
            raise ValueError(f"unknown status {self.status!r}")

    @property
    def length_bits(self) -> int:
        return int(self.bits.size)

    def with_status(self, status: str) -> KeyMaterial:
        if _STATUS_ORDER[status] < _STATUS_ORDER[self.status]:
            raise ValueError(f"illegal status transition {self.status} -> {status}")
        return replace(self, status=status)

    def split(self, n: int) -> tuple[KeyMaterial, KeyMaterial]:
        """Cut off the first ``n`` bits; both parts keep the original status."""
        if not 0 < n <= self.length_bits:
            raise ValueError(f"cannot split {self.length_bits} bits at {n}")
        head = replace(self, bits=self.bits[:n])
        tail = replace(self, bits=self.bits[n:], offset=self.offset + n)
        return head, tail

    def same_bits(self, other: KeyMaterial) -> bool:
        return np.array_equal(self.bits, other.bits)


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy in bits, with H(0) = H(1) = 0."""
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise ValueError(f"binary_entropy domain is [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def db_to_transmittance(att_db: float) -> float:
    if att_db < 0:
        raise ValueError(f"attenuation must be >= 0 dB, got {att_db}")
    return 10.0 ** (-att_db / 10.0)


def qber_from_visibility(vis: float) -> float:
    if not 0.0 <= vis <= 1.0:
        raise ValueError(f"visibility must be in [0, 1], got {vis}")
    return (1.0 - vis) / 2.0


def visibility_from_qber(qber: float) -> float:
    if not 0.0 <= qber <= 0.5:
        raise ValueError(f"qber must be in [0, 0.5], got {qber}")
    return 1.0 - 2.0 * qber
