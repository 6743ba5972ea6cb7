"""Trusted-node QKD network simulator and post-processing stack.

Three-state time-bin BB84 with one decoy intensity: Monte Carlo source,
channel and receiver, sifting, cascade reconciliation, hash verification,
Toeplitz privacy amplification, finite-key length, and a key management
layer with trusted-node relay.
"""

from qkdnet.core import (
    KeyMaterial,
    LinkParams,
    ProtocolParams,
    SourceParams,
    binary_entropy,
    db_to_transmittance,
    qber_from_visibility,
    visibility_from_qber,
)

__all__ = [
    "KeyMaterial",
    "LinkParams",
    "ProtocolParams",
    "SourceParams",
    "binary_entropy",
    "db_to_transmittance",
    "qber_from_visibility",
    "visibility_from_qber",
]

__version__ = "0.1.0"
