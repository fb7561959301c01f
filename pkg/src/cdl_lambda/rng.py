"""Named random streams derived from one seed.

Each consumer asks for its own stream by name, so adding a consumer never
shifts the numbers another one sees.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "substream_seed"]


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream_seed(seed: int, *names: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))


def stream(seed: int, *names: str) -> np.random.Generator:
    """Generator for the substream ``seed / names[0] / names[1] / ...``."""
    return np.random.default_rng(substream_seed(seed, *names))
