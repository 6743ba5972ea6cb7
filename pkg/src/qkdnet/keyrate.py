"""Finite-key security analysis for one-decoy three-state BB84.

Bounds follow the standard one-decoy treatment: Hoeffding-corrected
per-intensity counts, an upper bound on vacuum events from decoy-intensity
errors, a lower bound on single-photon events from the two-intensity count
difference, and a phase-error bound from X-basis single-photon errors plus
a finite-sample correction.  The secure length is

    l = s0 + s1 * (1 - H2(phi)) - lambda_EC - 6 log2(19/eps_sec) - log2(2/eps_corr)

floored and clamped at zero.  ``lambda_EC`` is the measured reconciliation
leak; the verification hash cost is the ``log2(2/eps_corr)`` term and is not
subtracted again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from qkdnet.core import ProtocolParams, binary_entropy


class BoundsVacuous(ValueError):
    """The decoy analysis cannot certify any single-photon events."""


@dataclass(frozen=True)
class DecoyCounts:
    n_z_mu1: float
    n_z_mu2: float
    n_x_mu1: float
    n_x_mu2: float
    m_x_mu1: float
    m_x_mu2: float
    m_z_mu1: float = 0.0
    m_z_mu2: float = 0.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        for m, n in (("m_x_mu1", "n_x_mu1"), ("m_x_mu2", "n_x_mu2"), ("m_z_mu1", "n_z_mu1"), ("m_z_mu2", "n_z_mu2")):
            if getattr(self, m) > getattr(self, n):
                raise ValueError(f"{m} exceeds {n}")

    @property
    def n_z(self) -> float:
        return self.n_z_mu1 + self.n_z_mu2

    @property
    def n_x(self) -> float:
        return self.n_x_mu1 + self.n_x_mu2

    def scaled(self, c: float) -> DecoyCounts:
        return DecoyCounts(**{k: v * c for k, v in vars(self).items()})

    @classmethod
    def from_sifted(cls, block, m_z=(0, 0)) -> DecoyCounts:
        return cls(
            block.n_z_mu1, block.n_z_mu2, block.n_x_mu1, block.n_x_mu2,
            block.m_x_mu1, block.m_x_mu2, m_z[0], m_z[1],
        )


@dataclass(frozen=True)
class DecoyBounds:
    s_z0_lower: float
    s_z0_upper: float
    s_z1_lower: float
    s_x1_lower: float
    v_x1_upper: float
    phi_z_upper: float


@dataclass(frozen=True)
class KeyLengthBreakdown:
    s_z0_lower: float
    s_z1_lower: float
    phi_z_upper: float
    lambda_ec: int
    overhead_bits: float
    l_secret: int
    block_time_s: float
    skr_bps: float


def photon_weight(n: int, protocol: ProtocolParams) -> float:
    """Probability that a pulse carries ``n`` photons, averaged over intensities."""
    return sum(
        p * math.exp(-mu) * mu**n / math.factorial(n)
        for mu, p in ((protocol.mu1, protocol.p_mu1), (protocol.mu2, protocol.p_mu2))
    )


def hoeffding_delta(total: float, eps_sec: float) -> float:
    return math.sqrt(total / 2.0 * math.log(19.0 / eps_sec))


def gamma_correction(eps: float, ratio: float, c: float, d: float) -> float:
    """Finite-sample deviation between phase error in Z and error ratio in X."""
    if ratio <= 0:
        return 0.0
    if ratio >= 1 or c <= 0 or d <= 0:
        return 0.5
    arg = (c + d) / (c * d * (1 - ratio) * ratio) * (19.0**2 / eps**2)
    return math.sqrt((c + d) * (1 - ratio) * ratio / (c * d * math.log(2)) * math.log2(arg))


def _basis_bounds(n1, n2, m2_err, n_tot, m_tot, p: ProtocolParams):
    """Vacuum upper/lower and single-photon lower bounds for one basis."""
    mu1, mu2, p1, p2, eps = p.mu1, p.mu2, p.p_mu1, p.p_mu2, p.eps_sec
    tau0, tau1 = photon_weight(0, p), photon_weight(1, p)
    dn = hoeffding_delta(n_tot, eps)
    dm = hoeffding_delta(m_tot, eps)
    n1_plus = math.exp(mu1) / p1 * (n1 + dn)
    n2_minus = math.exp(mu2) / p2 * (n2 - dn)
    s0_upper = 2.0 * (tau0 * math.exp(mu2) / p2 * (m2_err + dm) + dn)
    s0_lower = tau0 / (mu1 - mu2) * (mu1 * n2_minus - mu2 * n1_plus)
    s1_lower = (
        tau1 * mu1 / (mu2 * (mu1 - mu2))
        * (n2_minus - (mu2 / mu1) ** 2 * n1_plus - (mu1**2 - mu2**2) / mu1**2 * s0_upper / tau0)
    )
    return max(0.0, s0_lower), s0_upper, s1_lower


def decoy_bounds(counts: DecoyCounts, protocol: ProtocolParams, n_z_total: float | None = None) -> DecoyBounds:
    """Vacuum, single-photon and phase-error bounds.

    Raises :class:`BoundsVacuous` when the Z-basis single-photon lower bound
    is not positive.  If only the X-basis single-photon bound is vacuous the
    check basis carries no phase information and ``phi`` is set to 0.5.  The
    vacuum lower bound is clamped at zero; with one decoy it is usually zero
    and only the single-photon term carries key.
    """
    p = protocol
    nz = counts.n_z if n_z_total is None else n_z_total
    mz = counts.m_z_mu1 + counts.m_z_mu2
    s_z0_l, s_z0_u, s_z1_l = _basis_bounds(counts.n_z_mu1, counts.n_z_mu2, counts.m_z_mu2, nz, mz, p)
    if s_z1_l <= 0:
        raise BoundsVacuous(f"single-photon bound vacuous (s_z1={s_z1_l:.1f})")
    mx = counts.m_x_mu1 + counts.m_x_mu2
    _, _, s_x1_l = _basis_bounds(counts.n_x_mu1, counts.n_x_mu2, counts.m_x_mu2, counts.n_x, mx, p)
    tau1 = photon_weight(1, p)
    dm = hoeffding_delta(mx, p.eps_sec)
    v_x1 = tau1 / (p.mu1 - p.mu2) * (
        math.exp(p.mu1) / p.p_mu1 * (counts.m_x_mu1 + dm)
        - math.exp(p.mu2) / p.p_mu2 * (counts.m_x_mu2 - dm)
    )
    v_x1 = max(0.0, v_x1)
    if s_x1_l <= 0:
        return DecoyBounds(s_z0_l, s_z0_u, s_z1_l, s_x1_l, v_x1, 0.5)
    ratio = min(v_x1 / s_x1_l, 0.5)
    phi = ratio + gamma_correction(p.eps_sec, ratio, s_z1_l, s_x1_l)
    return DecoyBounds(s_z0_l, s_z0_u, s_z1_l, s_x1_l, v_x1, min(max(phi, 0.0), 0.5))


def overhead_bits(protocol: ProtocolParams) -> float:
    return 6 * math.log2(19.0 / protocol.eps_sec) + math.log2(2.0 / protocol.eps_corr)


def key_length(s_z0_lower: float, s_z1_lower: float, phi_z_upper: float, lambda_ec: float, protocol: ProtocolParams) -> int:
    if lambda_ec < 0:
        raise ValueError("lambda_ec must be >= 0")
    raw = (
        s_z0_lower
        + s_z1_lower * (1.0 - binary_entropy(min(max(phi_z_upper, 0.0), 0.5)))
        - lambda_ec
        - overhead_bits(protocol)
    )
    return max(0, math.floor(raw))


def skr(l_secret: int, block_time_s: float) -> float:
    if block_time_s <= 0:
        raise ValueError(f"block_time_s must be positive, got {block_time_s}")
    return l_secret / block_time_s


def secure_length(counts: DecoyCounts, lambda_ec: int, protocol: ProtocolParams, block_time_s: float) -> KeyLengthBreakdown:
    """Bounds, secret key length and rate for one block; vacuous bounds give ``l = 0``."""
    try:
        b = decoy_bounds(counts, protocol)
        s0, s1, phi = b.s_z0_lower, b.s_z1_lower, b.phi_z_upper
    except BoundsVacuous:
        s0, s1, phi = 0.0, 0.0, 0.5
    l = key_length(s0, s1, phi, lambda_ec, protocol)
    return KeyLengthBreakdown(
        s_z0_lower=s0,
        s_z1_lower=s1,
        phi_z_upper=phi,
        lambda_ec=int(lambda_ec),
        overhead_bits=overhead_bits(protocol),
        l_secret=l,
        block_time_s=block_time_s,
        skr_bps=skr(l, block_time_s),
    )


def expected_counts(link, protocol: ProtocolParams, source, n_z: float, qber_z_intrinsic: float = 0.0):
    """Expected decoy counts for a block of ``n_z`` sifted Z bits, and its duration."""
    from qkdnet.quantum_sim import DECOY, SIGNAL, X, Z, expected_sifted_rates

    rates = expected_sifted_rates(link, protocol, source, qber_z_intrinsic)
    z_rate = sum(rates[(Z, k)]["signal"] + rates[(Z, k)]["dark"] for k in (SIGNAL, DECOY))
    if z_rate <= 0:
        return None, math.inf
    t = n_z / z_rate

    def n(b, k):
        return (rates[(b, k)]["signal"] + rates[(b, k)]["dark"]) * t

    def m(b, k):
        return rates[(b, k)]["errors"] * t

    counts = DecoyCounts(
        n(Z, SIGNAL), n(Z, DECOY), n(X, SIGNAL), n(X, DECOY),
        m(X, SIGNAL), m(X, DECOY), m(Z, SIGNAL), m(Z, DECOY),
    )
    return counts, t


def analytic_breakdown(link, protocol: ProtocolParams, source, n_z: float, qber_z_intrinsic: float, f_ec: float) -> KeyLengthBreakdown:
    """Expected-count evaluation of one block: no Monte Carlo.

    ``lambda_EC`` is modeled as ``f_ec * n_z * H2(QBER_Z)``.
    """
    counts, t = expected_counts(link, protocol, source, n_z, qber_z_intrinsic)
    if counts is None:
        return KeyLengthBreakdown(0.0, 0.0, 0.5, 0, overhead_bits(protocol), 0, math.inf, 0.0)
    qz = (counts.m_z_mu1 + counts.m_z_mu2) / counts.n_z
    lam = math.ceil(f_ec * counts.n_z * binary_entropy(min(qz, 0.5)))
    return secure_length(counts, lam, protocol, t)
