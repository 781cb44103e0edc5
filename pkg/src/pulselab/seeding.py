"""Keyed, counter-based random streams derived from one root seed."""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def derive_seed(root, *keys):
    """Deterministic 63-bit child seed of ``root`` for the given key path."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF] + [_key(k) for k in keys])
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 31) ^ int(lo)


def make_rng(seed, *keys):
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
