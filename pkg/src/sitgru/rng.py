"""Named random streams derived from one master seed."""

import zlib

import numpy as np


def derive_seed(master: int, name: str) -> int:
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def derive_rng(master: int, name: str) -> np.random.Generator:
    """Generator for component ``name``; adding new names never shifts existing streams."""
    return np.random.default_rng(derive_seed(master, name))
