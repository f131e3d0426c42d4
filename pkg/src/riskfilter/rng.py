"""Counter-based random substreams.

A stream is identified by a master seed, a purpose string and any number of
integer indices, so results do not depend on the order in which streams are
requested.
"""
from __future__ import annotations

import zlib

import numpy as np


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def substream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    key = (_purpose_key(purpose),) + tuple(int(i) for i in index)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(seed: int, purpose: str, *index: int) -> int:
    """An integer seed for APIs that want one instead of a Generator."""
    key = (_purpose_key(purpose),) + tuple(int(i) for i in index)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
