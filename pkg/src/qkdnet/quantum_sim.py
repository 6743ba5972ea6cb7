"""Monte Carlo model of the decoy-state time-bin source, fiber and receiver.

Two simulation paths share one physical model:

* :func:`generate_states` + :func:`simulate_link` walk every pulse slot.
  They are exact but only practical for up to ~10^7 slots.
* :func:`sample_detections` draws only the slots in which a detector
  registers a click (a renewal process with the hold-off folded into the
  inter-click gap) and samples Alice's preparation for those slots from its
  posterior.  Since Alice's states are i.i.d., preparations in slots without
  a detection never influence post-processing.  This is the path used for
  whole blocks, which span ~10^10 slots.

Bob's Z and X detectors are modeled as independent detection processes in
the sampled path; the per-slot coincidence probability is ~1e-6, and both
paths discard coincident clicks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import erf

from qkdnet.core import LinkParams, ProtocolParams, SourceParams, qber_from_visibility

Z, X = 0, 1
SIGNAL, DECOY = 0, 1
BASIS_NAMES = ("Z", "X")

_CHUNK_SLOTS = 1 << 20
_BATCH_EVENTS = 1 << 16


class PreparedState(NamedTuple):
    slot: int
    basis: int
    bit: int
    intensity: int


class DetectionRecord(NamedTuple):
    slot: int
    basis_measured: int
    outcome: int
    time_offset_s: float


@dataclass(frozen=True)
class PreparedStates:
    """Column store of Alice's preparations, sorted by slot.

    In the X basis ``bit`` is always 0: the three-state protocol has a
    single X state.
    """

    slot: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    intensity: np.ndarray

    def __len__(self):
        return int(self.slot.size)

    def __getitem__(self, i) -> PreparedState:
        return PreparedState(
            int(self.slot[i]), int(self.basis[i]), int(self.bit[i]), int(self.intensity[i])
        )

    @classmethod
    def from_list(cls, states) -> PreparedStates:
        arr = np.array([tuple(s) for s in states], dtype=np.int64).reshape(-1, 4)
        return cls(
            slot=arr[:, 0].copy(),
            basis=arr[:, 1].astype(np.uint8),
            bit=arr[:, 2].astype(np.uint8),
            intensity=arr[:, 3].astype(np.uint8),
        )

    def take(self, idx) -> PreparedStates:
        return PreparedStates(self.slot[idx], self.basis[idx], self.bit[idx], self.intensity[idx])


@dataclass(frozen=True)
class DetectionRecords:
    """Column store of Bob's time-tagged detections, sorted by slot.

    ``is_dark`` is simulator ground truth.  :meth:`public` strips it; only
    the public view is handed to post-processing.
    """

    slot: np.ndarray
    basis: np.ndarray
    outcome: np.ndarray
    time_offset_s: np.ndarray
    is_dark: np.ndarray | None = None

    def __len__(self):
        return int(self.slot.size)

    def __getitem__(self, i) -> DetectionRecord:
        return DetectionRecord(
            int(self.slot[i]), int(self.basis[i]), int(self.outcome[i]), float(self.time_offset_s[i])
        )

    @classmethod
    def from_list(cls, records) -> DetectionRecords:
        records = list(records)
        return cls(
            slot=np.array([r[0] for r in records], dtype=np.int64),
            basis=np.array([r[1] for r in records], dtype=np.uint8),
            outcome=np.array([r[2] for r in records], dtype=np.uint8),
            time_offset_s=np.array([r[3] for r in records], dtype=float),
        )

    def take(self, idx) -> DetectionRecords:
        dark = None if self.is_dark is None else self.is_dark[idx]
        return DetectionRecords(
            self.slot[idx], self.basis[idx], self.outcome[idx], self.time_offset_s[idx], dark
        )

    def public(self) -> DetectionRecords:
        return DetectionRecords(self.slot, self.basis, self.outcome, self.time_offset_s, None)


def _substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


def holdoff_slots(link: LinkParams, source: SourceParams) -> int:
    """Minimum slot distance between two registered clicks of one detector."""
    return max(1, math.ceil(link.holdoff_s * source.qubit_rate_hz - 1e-9))


def generate_states(n: int, protocol: ProtocolParams, seed: int) -> PreparedStates:
    """Draw ``n`` i.i.d. preparations; identical seeds give identical sequences."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    parts = []
    for c, start in enumerate(range(0, n, _CHUNK_SLOTS)):
        m = min(_CHUNK_SLOTS, n - start)
        rng = _substream(seed, 0, c)
        basis = (rng.random(m) >= protocol.p_za).astype(np.uint8)
        bit = rng.integers(0, 2, m, dtype=np.uint8)
        bit[basis == X] = 0
        intensity = (rng.random(m) >= protocol.p_mu1).astype(np.uint8)
        parts.append((basis, bit, intensity))
    return PreparedStates(
        slot=np.arange(n, dtype=np.int64),
        basis=np.concatenate([p[0] for p in parts]),
        bit=np.concatenate([p[1] for p in parts]),
        intensity=np.concatenate([p[2] for p in parts]),
    )


def _apply_holdoff(slots: np.ndarray, dead: int) -> np.ndarray:
    """Boolean mask of candidate clicks that fall outside the previous dead time."""
    keep = np.zeros(slots.size, dtype=bool)
    last = -dead
    for i, s in enumerate(slots.tolist()):
        if s - last >= dead:
            keep[i] = True
            last = s
    return keep


def _outcomes(rng, det_basis, alice_basis, alice_bit, dark, qz, qx):
    """Bob's outcome for one detector given Alice's preparation and click origin."""
    m = det_basis.size
    coin = rng.integers(0, 2, m, dtype=np.uint8)
    u = rng.random(m)
    out = coin.copy()
    z_ok = (~dark) & (det_basis == Z) & (alice_basis == Z)
    out[z_ok] = alice_bit[z_ok] ^ (u[z_ok] < qz).astype(np.uint8)
    x_ok = (~dark) & (det_basis == X) & (alice_basis == X)
    out[x_ok] = (u[x_ok] < qx).astype(np.uint8)
    return out


def _offsets(rng, dark, link: LinkParams, source: SourceParams):
    half = source.slot_period_s / 2
    m = dark.size
    gauss = rng.normal(0.0, link.jitter_rms_s, m) if link.jitter_rms_s > 0 else np.zeros(m)
    unif = rng.uniform(-half, half, m)
    return np.clip(np.where(dark, unif, gauss), -half, half)


def simulate_link(
    states: PreparedStates,
    link: LinkParams,
    protocol: ProtocolParams,
    source: SourceParams,
    seed: int,
    qber_z_intrinsic: float = 0.0,
) -> DetectionRecords:
    """Pulse-by-pulse detection at Bob for the given preparations."""
    n = len(states)
    dark_p = link.dark_rate_hz / source.qubit_rate_hz
    mus = np.array([protocol.mu1, protocol.mu2])
    t = np.array([link.transmittance("Z"), link.transmittance("X")])
    cand = {Z: [], X: []}
    for c, start in enumerate(range(0, n, _CHUNK_SLOTS)):
        stop = min(n, start + _CHUNK_SLOTS)
        rng = _substream(seed, 1, c)
        m = stop - start
        bob = rng.integers(0, 2, m, dtype=np.uint8)
        mu = mus[states.intensity[start:stop]]
        p_sig = -np.expm1(-mu * t[bob])
        sig = rng.random(m) < p_sig
        for b in (Z, X):
            dark_click = rng.random(m) < dark_p
            sig_b = sig & (bob == b)
            idx = np.flatnonzero(sig_b | dark_click)
            cand[b].append((states.slot[idx + start], ~sig_b[idx]))
    qz = qber_z_intrinsic
    qx = qber_from_visibility(link.visibility_x)
    dead = holdoff_slots(link, source)
    per_det = []
    for b in (Z, X):
        idx = np.concatenate([p[0] for p in cand[b]]) if cand[b] else np.zeros(0, np.int64)
        dark = np.concatenate([p[1] for p in cand[b]]) if cand[b] else np.zeros(0, bool)
        keep = _apply_holdoff(idx, dead)
        per_det.append((idx[keep], dark[keep], b))
    return _assemble(per_det, states, link, source, seed, qz, qx)


def _assemble(per_det, states, link, source, seed, qz, qx):
    """Drop coincident clicks, draw outcomes and offsets, return sorted records."""
    slots = np.concatenate([p[0] for p in per_det])
    dark = np.concatenate([p[1] for p in per_det])
    basis = np.concatenate([np.full(p[0].size, p[2], dtype=np.uint8) for p in per_det])
    order = np.argsort(slots, kind="stable")
    slots, dark, basis = slots[order], dark[order], basis[order]
    if slots.size:
        dup = np.zeros(slots.size, dtype=bool)
        same = slots[1:] == slots[:-1]
        dup[1:] |= same
        dup[:-1] |= same
        slots, dark, basis = slots[~dup], dark[~dup], basis[~dup]
    pos = np.searchsorted(states.slot, slots)
    a_basis, a_bit = states.basis[pos], states.bit[pos]
    rng = _substream(seed, 2)
    outcome = _outcomes(rng, basis, a_basis, a_bit, dark, qz, qx)
    offs = _offsets(rng, dark, link, source)
    return DetectionRecords(slots, basis, outcome, offs, dark)


def click_model(link: LinkParams, protocol: ProtocolParams, source: SourceParams):
    """Per-slot click probabilities of each detector.

    Returns ``{basis: (P_click, [(weight_k, signal_share_k) for k in intensities])}``
    where ``weight_k`` is the posterior probability of intensity ``k`` given a
    click and ``signal_share_k`` the probability that such a click carries a
    photon rather than being dark.
    """
    d = link.dark_rate_hz / source.qubit_rate_hz
    out = {}
    for b in (Z, X):
        t = link.transmittance(BASIS_NAMES[b])
        per_k = []
        total = 0.0
        for mu, pk in ((protocol.mu1, protocol.p_mu1), (protocol.mu2, protocol.p_mu2)):
            q = 0.5 * -math.expm1(-mu * t)
            c = 1.0 - (1.0 - q) * (1.0 - d)
            per_k.append((pk * c, q / c if c > 0 else 0.0))
            total += pk * c
        out[b] = (total, [(w / total if total > 0 else 0.0, s) for w, s in per_k])
    return out


def _renewal_slots(rng, p: float, dead: int, start: int, count: int, first: bool):
    gaps = rng.geometric(p, count).astype(np.int64)
    if first:
        gaps[1:] += dead - 1
        gaps[0] -= 1
        return start + np.cumsum(gaps)
    gaps += dead - 1
    return start + np.cumsum(gaps)


def sample_detections(
    n_slots: int,
    link: LinkParams,
    protocol: ProtocolParams,
    source: SourceParams,
    seed: int,
    qber_z_intrinsic: float = 0.0,
) -> tuple[PreparedStates, DetectionRecords]:
    """Sample all registered detections in slots ``[0, n_slots)``.

    Returns Alice's preparations for the detected slots only, and the
    records.  Statistically equivalent to :func:`simulate_link` on
    ``generate_states(n_slots)`` up to the detector-independence noted in the
    module docstring.
    """
    model = click_model(link, protocol, source)
    dead = holdoff_slots(link, source)
    per_det = []
    prep = []
    for b in (Z, X):
        p_click, weights = model[b]
        if p_click <= 0:
            continue
        slots_parts = []
        last, first, batch = -1, True, 0
        while True:
            rng = _substream(seed, 3, b, batch)
            s = _renewal_slots(rng, p_click, dead, last if not first else 0, _BATCH_EVENTS, first)
            slots_parts.append(s[s < n_slots])
            if s[-1] >= n_slots:
                break
            last, first, batch = int(s[-1]), False, batch + 1
        slots = np.concatenate(slots_parts)
        rng = _substream(seed, 4, b)
        m = slots.size
        w_decoy = weights[1][0]
        intensity = (rng.random(m) < w_decoy).astype(np.uint8)
        sig_share = np.where(intensity == SIGNAL, weights[0][1], weights[1][1])
        dark = rng.random(m) >= sig_share
        a_basis = (rng.random(m) >= protocol.p_za).astype(np.uint8)
        a_bit = rng.integers(0, 2, m, dtype=np.uint8)
        a_bit[a_basis == X] = 0
        per_det.append((slots, dark, b))
        prep.append((slots, a_basis, a_bit, intensity))
    if not per_det:
        empty = np.zeros(0, np.int64)
        e8 = np.zeros(0, np.uint8)
        return (
            PreparedStates(empty, e8, e8, e8),
            DetectionRecords(empty, e8, e8, np.zeros(0), np.zeros(0, bool)),
        )
    all_slots = np.concatenate([p[0] for p in prep])
    order = np.argsort(all_slots, kind="stable")
    states = PreparedStates(
        slot=all_slots[order],
        basis=np.concatenate([p[1] for p in prep])[order],
        bit=np.concatenate([p[2] for p in prep])[order],
        intensity=np.concatenate([p[3] for p in prep])[order],
    )
    # coincident slots appear twice in ``states``; records drop them below
    _, first_idx = np.unique(states.slot, return_index=True)
    states = states.take(first_idx)
    qx = qber_from_visibility(link.visibility_x)
    records = _assemble(per_det, states, link, source, seed, qber_z_intrinsic, qx)
    return states, records


def apply_temporal_filter(records: DetectionRecords, width_s: float):
    """Keep records within ``width_s/2`` of the slot center.

    Returns ``(kept, {"signal": fraction, "dark": fraction})``; the
    acceptance fractions use simulator ground truth and are NaN when it is
    not available.
    """
    if width_s <= 0:
        raise ValueError(f"filter width must be positive, got {width_s}")
    keep = np.abs(records.time_offset_s) <= width_s / 2
    acc = {"signal": float("nan"), "dark": float("nan")}
    if records.is_dark is not None:
        for name, mask in (("signal", ~records.is_dark), ("dark", records.is_dark)):
            if mask.any():
                acc[name] = float(keep[mask].mean())
    return records.take(keep), acc


def filter_acceptance(link: LinkParams, source: SourceParams) -> tuple[float, float]:
    """Analytic (signal, dark) temporal-filter acceptance."""
    w = link.filter_width_s
    period = source.slot_period_s
    if link.jitter_rms_s > 0:
        a_sig = float(erf(w / (2 * math.sqrt(2) * link.jitter_rms_s)))
    else:
        a_sig = 1.0
    return a_sig, min(w, period) / period


def expected_sifted_rates(
    link: LinkParams,
    protocol: ProtocolParams,
    source: SourceParams,
    qber_z_intrinsic: float = 0.0,
) -> dict:
    """Expected sifted count and error rates (per second) after the filter.

    Keys are ``(basis, intensity)``; values are dicts with ``signal``,
    ``dark`` (count rates) and ``errors`` (error rate).
    """
    model = click_model(link, protocol, source)
    dead = holdoff_slots(link, source)
    f = source.qubit_rate_hz
    a_sig, a_dark = filter_acceptance(link, source)
    qx = qber_from_visibility(link.visibility_x)
    reg = {b: (f / (dead - 1 + 1.0 / p) if p > 0 else 0.0) for b, (p, _) in model.items()}
    rates = {}
    for b in (Z, X):
        p_alice = protocol.p_za if b == Z else protocol.p_xa
        e_sig = qber_z_intrinsic if b == Z else qx
        other = reg[X if b == Z else Z] / f
        for k, (w, share) in enumerate(model[b][1]):
            base = reg[b] * w * p_alice * (1.0 - other)
            sig = base * share * a_sig
            dark = base * (1.0 - share) * a_dark
            rates[(b, k)] = {"signal": sig, "dark": dark, "errors": sig * e_sig + dark / 2}
    return rates


def sifted_z_rate(link, protocol, source, qber_z_intrinsic=0.0) -> float:
    r = expected_sifted_rates(link, protocol, source, qber_z_intrinsic)
    return sum(r[(Z, k)]["signal"] + r[(Z, k)]["dark"] for k in (SIGNAL, DECOY))


def observed_qbers(link, protocol, source, qber_z_intrinsic=0.0) -> tuple[float, float]:
    """Expected (QBER_Z, QBER_X) of the sifted data, darks included."""
    r = expected_sifted_rates(link, protocol, source, qber_z_intrinsic)
    out = []
    for b in (Z, X):
        n = sum(r[(b, k)]["signal"] + r[(b, k)]["dark"] for k in (SIGNAL, DECOY))
        m = sum(r[(b, k)]["errors"] for k in (SIGNAL, DECOY))
        out.append(m / n if n > 0 else 0.0)
    return out[0], out[1]


def calibrate_link(
    link: LinkParams,
    protocol: ProtocolParams,
    source: SourceParams,
    target_qber_z: float,
    target_qber_x: float,
    target_block_time_s: float | None = None,
    n_z: float | None = None,
) -> tuple[LinkParams, float]:
    """Fit unobserved receiver parameters to measured link figures.

    With a target block time, the timing jitter is solved so that ``n_z``
    sifted Z bits take that long.  Then visibility and the intrinsic Z error
    are solved so the expected sifted QBERs, dark counts included, hit the
    targets.  Returns ``(link, qber_z_intrinsic)``.
    """
    from dataclasses import replace

    from scipy.optimize import brentq

    if target_block_time_s is not None:
        if n_z is None:
            raise ValueError("n_z is required to fit the block time")

        def resid(sigma):
            lk = replace(link, jitter_rms_s=sigma)
            return n_z / sifted_z_rate(lk, protocol, source) - target_block_time_s

        sigma = brentq(resid, 1e-13, source.slot_period_s, xtol=1e-16)
        link = replace(link, jitter_rms_s=sigma)
    r = expected_sifted_rates(replace(link, visibility_x=1.0), protocol, source)
    out = []
    for b, target in ((Z, target_qber_z), (X, target_qber_x)):
        sig = sum(r[(b, k)]["signal"] for k in (SIGNAL, DECOY))
        dark = sum(r[(b, k)]["dark"] for k in (SIGNAL, DECOY))
        e = (target * (sig + dark) - dark / 2) / sig
        if not 0 <= e <= 0.5:
            raise ValueError(f"target QBER {target} unreachable in basis {BASIS_NAMES[b]}")
        out.append(e)
    link = replace(link, visibility_x=1.0 - 2.0 * out[1])
    return link, out[0]
