"""Selective-invariance self-supervised learning with evidential trust gates.

Deterministic desk-scale research code: float64 throughout, every random
draw derived from (seed, purpose tags), bit-identical reruns by contract.
"""

__version__ = "0.1.0"

from .kernels import get_backend as kernel_backend  # noqa: F401
