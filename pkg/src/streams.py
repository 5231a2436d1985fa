"""
Keyed random streams

Every random draw in the laboratory comes from a generator addressed by
(master seed, purpose tag, integer key...). The same address always yields
the same stream, independent of call order or thread.
"""

import zlib
from typing import Tuple

import numpy as np


def _tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream_key(tag: str, *key: int) -> Tuple[int, ...]:
    """Spawn key for a (tag, key...) address"""
    for part in key:
        if int(part) < 0:
            raise ValueError(f"Stream keys must be nonnegative, got {part}")
    return (_tag_code(tag),) + tuple(int(part) for part in key)


def keyed_generator(master_seed: int, tag: str, *key: int) -> np.random.Generator:
    """
    Build the generator for one stream address

    Args:
        master_seed: Run-level seed
        tag: Purpose of the stream ('noise', 'init', 'replica', ...)
        *key: Integer coordinates inside the purpose (column, block, ...)

    Returns:
        Philox-backed numpy Generator
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=stream_key(tag, *key))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, tag: str, *key: int) -> int:
    """Derive a child master seed (e.g. per replica) from a parent one"""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=stream_key(tag, *key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
