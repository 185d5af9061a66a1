"""Sub-seed derivation.

Every random stream in the package is keyed by ``(seed, purpose)``: the
sub-seed is the first eight bytes (little endian) of
``sha256(f"{seed}:{purpose}")``.  One top-level seed therefore fixes every
stream while unrelated purposes stay statistically independent.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))
