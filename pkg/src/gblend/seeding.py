"""Labeled sub-seed derivation.

Every random stream in a run is derived from the root seed and a string
label, so the stream a component sees does not depend on how many draws
other components made before it.
"""
import hashlib

import numpy as np


def derive_seed(root: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(root)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, label))
