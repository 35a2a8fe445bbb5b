"""Counter-based random streams keyed by (seed, name, counters...).

Every draw in a run comes from a Philox generator whose key is derived from
the global seed plus a tuple of integers (for example step, document ordinal
and rollout ordinal). Streams never depend on the order in which other
streams were consumed, so threaded and serial execution see identical
samples.
"""

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    key = (_name_key(name),) + tuple(int(c) for c in counters)
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
