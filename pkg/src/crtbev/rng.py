"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

ROOT_MASK = (1 << 64) - 1


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for (seed, name, ...). Stable across platforms."""
    key = [int(seed) & ROOT_MASK]
    for name in names:
        if isinstance(name, str):
            key.append(zlib.crc32(name.encode("utf-8")))
        else:
            key.append(int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
