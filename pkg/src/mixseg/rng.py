"""Seed plumbing: every stochastic stage draws from a named substream of one root seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def substream(root_seed: int, *path) -> np.random.Generator:
    """Deterministic generator for (root_seed, path...); distinct paths are independent."""
    entropy = [int(root_seed)] + [_key_int(k) for k in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
