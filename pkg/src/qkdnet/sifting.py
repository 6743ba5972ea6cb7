"""Basis sifting and per-intensity tallies for the decoy analysis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qkdnet.quantum_sim import DECOY, SIGNAL, X, Z, DetectionRecords, PreparedStates


class SiftingError(ValueError):
    pass


@dataclass(frozen=True)
class SiftedBlock:
    """Matched-basis events of one block.

    The key strings hold Z-basis events only; X-basis events contribute
    counts and error counts per intensity.  ``intensity_z`` tags each key
    bit (0 signal, 1 decoy) since the tags are public after sifting.
    """

    bits_alice: np.ndarray
    bits_bob: np.ndarray
    intensity_z: np.ndarray
    n_z_mu1: int
    n_z_mu2: int
    n_x_mu1: int
    n_x_mu2: int
    m_x_mu1: int
    m_x_mu2: int
    dropped: int = 0
    first_slot: int = 0
    last_slot: int = -1

    @property
    def n_z(self) -> int:
        return self.n_z_mu1 + self.n_z_mu2

    @property
    def n_x(self) -> int:
        return self.n_x_mu1 + self.n_x_mu2

    @property
    def qber_z_observed(self) -> float:
        if self.n_z == 0:
            return 0.0
        return float(np.count_nonzero(self.bits_alice != self.bits_bob)) / self.n_z

    @property
    def qber_x_observed(self) -> float:
        if self.n_x == 0:
            return 0.0
        return (self.m_x_mu1 + self.m_x_mu2) / self.n_x

    def z_errors_by_intensity(self, bob_bits=None) -> tuple[int, int]:
        """Z-basis error counts per intensity against ``bob_bits`` (default: raw Bob key)."""
        bob = self.bits_bob if bob_bits is None else bob_bits
        err = self.bits_alice != bob
        return (
            int(np.count_nonzero(err & (self.intensity_z == SIGNAL))),
            int(np.count_nonzero(err & (self.intensity_z == DECOY))),
        )


def match_records(preparations: PreparedStates, records: DetectionRecords):
    """Return (record_pos, prep_pos) of records whose basis matches the preparation."""
    slots = records.slot
    if slots.size and np.any(np.diff(slots) <= 0):
        if np.unique(slots).size != slots.size:
            raise SiftingError("duplicate detection records for one slot")
        raise SiftingError("records must be sorted by slot")
    pos = np.searchsorted(preparations.slot, slots)
    bad = (pos >= len(preparations)) | (preparations.slot[np.minimum(pos, len(preparations) - 1)] != slots) \
        if len(preparations) else np.ones(slots.size, dtype=bool)
    if np.any(bad):
        raise SiftingError(f"record references unknown slot {int(slots[np.argmax(bad)])}")
    keep = np.flatnonzero(preparations.basis[pos] == records.basis)
    return keep, pos[keep]


def sift(preparations: PreparedStates, records: DetectionRecords, n_z_target: int | None = None) -> SiftedBlock:
    """Sift one block.

    With ``n_z_target`` the block is cut right after the ``n_z_target``-th
    Z-basis match; X-basis matches are counted over the same slot span and
    later records are ignored (they belong to the next block).
    """
    rpos, ppos = match_records(preparations, records)
    basis = records.basis[rpos]
    if n_z_target is not None:
        zcum = np.cumsum(basis == Z)
        if zcum.size and zcum[-1] >= n_z_target:
            cut = int(np.searchsorted(zcum, n_z_target)) + 1
            rpos, ppos, basis = rpos[:cut], ppos[:cut], basis[:cut]
    span = len(records) if n_z_target is None or not rpos.size else int(rpos[-1]) + 1
    is_z = basis == Z
    zr, zp = rpos[is_z], ppos[is_z]
    xr, xp = rpos[~is_z], ppos[~is_z]
    inten_z = preparations.intensity[zp]
    inten_x = preparations.intensity[xp]
    x_err = records.outcome[xr] != preparations.bit[xp]
    return SiftedBlock(
        bits_alice=preparations.bit[zp].astype(np.uint8),
        bits_bob=records.outcome[zr].astype(np.uint8),
        intensity_z=inten_z.astype(np.uint8),
        n_z_mu1=int(np.count_nonzero(inten_z == SIGNAL)),
        n_z_mu2=int(np.count_nonzero(inten_z == DECOY)),
        n_x_mu1=int(np.count_nonzero(inten_x == SIGNAL)),
        n_x_mu2=int(np.count_nonzero(inten_x == DECOY)),
        m_x_mu1=int(np.count_nonzero(x_err & (inten_x == SIGNAL))),
        m_x_mu2=int(np.count_nonzero(x_err & (inten_x == DECOY))),
        dropped=span - rpos.size,
        first_slot=int(records.slot[0]) if len(records) else 0,
        last_slot=int(records.slot[span - 1]) if span else -1,
    )
