"""Per-purpose seed derivation.

Every random stream comes from one global seed:
``derive_seed(global_seed, "fold", i)`` hashes the repr of the key tuple
with BLAKE2b and keeps the first 8 bytes as an unsigned 64-bit integer.
The result does not depend on ``PYTHONHASHSEED`` or the platform.
"""
import hashlib

import numpy as np


def derive_seed(*keys):
    text = "\x1f".join(repr(k) for k in keys).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def rng(*keys):
    return np.random.default_rng(derive_seed(*keys))
