"""
Named random streams derived from one master seed.

Every random draw in protomargin comes from a stream named after its purpose
(``data``, ``init``, ``batching``, ``augment``, ``bootstrap``), so one component can
be reproduced without replaying the others.
"""

import zlib

import numpy as np


STREAMS = ("data", "init", "batching", "augment", "bootstrap")


def derive_seed(master_seed: int, stream: str, *extra: int) -> int:
    """
    Derive a 63-bit seed for `stream` (and optional integer sub-keys).

    Example:
        ```python
        from protomargin.seeding import derive_seed

        sample_seed = derive_seed(7, "data", 42)
        ```
    """
    if master_seed < 0:
        raise ValueError(f"seed must be nonnegative, got {master_seed}")
    key = [master_seed, zlib.crc32(stream.encode("utf-8")), *extra]
    state = np.random.SeedSequence(key).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def stream_rng(master_seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Return a PCG64 generator for the named stream."""
    return np.random.default_rng(derive_seed(master_seed, stream, *extra))
