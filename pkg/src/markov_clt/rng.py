"""Counter-based random stream derivation.

Every random stream in the toolkit is obtained from one 64-bit master seed and
a key ``(purpose tag, index, index, ...)``. The key is fed to numpy's
``SeedSequence`` as its spawn key and the resulting state initialises a Philox
4x64-10 counter-based generator. Re-running with the same master seed and key
reproduces the stream bit for bit, independently of how work is scheduled.
"""

import hashlib

import numpy as np

GENERATOR_ALGORITHM = "philox4x64-10/seedsequence-spawnkey/sha256-tag"

# Paths are simulated in fixed-size blocks; each block owns one stream keyed by
# its block index. Block size is part of the stream definition.
BLOCK_SIZE = 4096


def tag_code(tag):
    """Stable 32-bit integer for a purpose tag."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(seed, tag, *indices):
    """Return a Philox generator for the key ``(tag, *indices)``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"master seed must be a 64-bit unsigned integer, got {seed}")
    key = (tag_code(tag),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, tag, *indices):
    """Derive a child 64-bit master seed (for nested experiments)."""
    key = (tag_code(tag),) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])
