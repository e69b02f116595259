"""Seed derivation and random generators.

All randomness in the package flows from a single root seed. Named
substreams are derived by hashing ``"{root}:{label}"``, so adding a new
consumer never perturbs the draws of existing ones, and the same
(root, label) pair yields bit-identical streams on every platform.
Generators are counter-based (Philox), so creation order is irrelevant.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    """Map a root seed and a stream label to a stable 64-bit seed."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(root: int, label: str) -> np.random.Generator:
    """Create an independent generator for the named substream."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root, label)))
