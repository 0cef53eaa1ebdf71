"""Counter-based random streams keyed by (seed, tag, index...).

Every stochastic operation draws from ``stream(seed, tag, *index)`` where the
tag names the operation (``"popdyn.sweep"``) and the index names the unit of
work (generation, chunk). Streams never depend on thread count or on the order
in which work items run.
"""
import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "big")


def param_key(value: float) -> int:
    """Stable key of a real parameter, exact to the last bit."""
    return int.from_bytes(hashlib.sha256(float(value).hex().encode("ascii")).digest()[:8], "big")


def _entropy(seed: int, tag: str, index) -> list:
    return [int(seed) & _MASK, tag_key(tag), *(int(i) & _MASK for i in index)]


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_entropy(seed, tag, index))))


def derive_seed(seed: int, tag: str, *index: int) -> int:
    """A child master seed, e.g. one per threshold scan point."""
    state = np.random.SeedSequence(_entropy(seed, tag, index)).generate_state(1, dtype=np.uint64)
    return int(state[0])
