"""Named random sub-streams derived from a single integer seed."""

import numpy as np


def stream_id(name: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")


def substream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream_id(name), index]))
