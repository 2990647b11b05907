"""Deterministic sub-seed derivation.

All randomness in a run flows from one root seed. Components derive their
own generators by hashing (root, purpose tags), so adding a consumer never
shifts the stream seen by another.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *tags) -> int:
    """Derive a 64-bit sub-seed from a root seed and hashable tags."""
    text = repr((int(root),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root: int, *tags) -> np.random.Generator:
    """Independent generator for (root, tags)."""
    return np.random.default_rng(derive_seed(root, *tags))
