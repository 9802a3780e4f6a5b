"""Named random streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "train", "lc", "search")


def stream_seed(root: int, name: str) -> int:
    """Deterministic 63-bit seed for the stream ``name`` under ``root``.

    Distinct names give statistically independent streams, so changing how
    one subsystem consumes randomness never perturbs another.
    """
    if root < 0:
        raise ValueError("root seed must be non-negative")
    seq = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))
