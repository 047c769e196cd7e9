"""Named substreams from a single 64-bit master seed.

All randomness in a run flows from one seed; independent consumers (rollout
batches, buffer sampling, parameter init) get their own streams by hashing
the master seed with a tag, so adding a consumer never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *parts) -> int:
    """Stable 64-bit seed from (master, tag...) via SHA-256."""
    text = repr((int(master),) + tuple(parts)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master: int, *parts) -> np.random.Generator:
    key = np.array([np.uint64(derive_seed(master, *parts)), np.uint64(0)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
