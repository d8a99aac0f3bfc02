"""Hybrid full/streaming-attention transformer inference at desk scale.

Converts a decoder-only transformer into a hybrid at test time: layers
whose attention mass piles onto sink tokens plus a recent window are
detected during prefill and their KV caches shrunk to that window, while
the rest keep full attention. Ships with a numerical checker for the
formal error bounds the substitution obeys.
"""

from .errors import ContractViolation, InputError

__all__ = ["ContractViolation", "InputError"]
__version__ = "0.1.0"
