"""
Deterministic seed derivation
"""
import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(base_seed, *keys):
    """
    Derive a 32-bit seed from a base seed and any mix of int/str keys.

    Independent of call order and thread scheduling: the same inputs always give the same seed.
    """
    entropy = [int(base_seed) & 0xFFFFFFFF] + [_key_to_int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def make_rng(base_seed, *keys):
    return np.random.default_rng(derive_seed(base_seed, *keys))
