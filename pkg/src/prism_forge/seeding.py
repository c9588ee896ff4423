"""Named RNG streams derived from one master seed.

Every stage, restart, episode, and trial draws from its own generator so
results are reproducible in isolation and independent of execution order.
"""

import zlib

import numpy as np


def stream_key(name: str, *indices: int) -> tuple:
    return (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) & 0xFFFFFFFF for i in indices)


def stream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the stream identified by (name, indices) under master_seed."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=stream_key(name, *indices))
    return np.random.default_rng(ss)
