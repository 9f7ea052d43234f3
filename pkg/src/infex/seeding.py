"""Named random streams derived from one master seed.

Every stage asks for its own stream by name, so adding a new stage never
shifts the draws seen by an existing one.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, name))
