"""Deterministic seed derivation.

All randomness in a run flows from one root seed; per-stage generators are
derived by hashing the root seed with a stage label, so adding a stage never
perturbs the streams of existing stages.
"""

import hashlib

import numpy as np


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a 63-bit child seed from ``root_seed`` and a stage label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(root_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, label))
