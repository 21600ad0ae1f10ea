"""Deterministic per-consumer random streams derived from one root seed."""

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def child_seed(root: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(k) for k in keys))


def child_rng(root: int, *keys) -> np.random.Generator:
    """Generator for the consumer named by ``keys`` (strings or ints).

    The same ``(root, keys)`` always yields the same stream, and streams for
    different keys are statistically independent.
    """
    return np.random.default_rng(child_seed(root, *keys))


def child_int(root: int, *keys) -> int:
    return int(child_seed(root, *keys).generate_state(1)[0])
