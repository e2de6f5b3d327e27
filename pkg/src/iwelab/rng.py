"""Seed derivation and random generators.

All randomness in the package flows from explicit 64-bit root seeds through
counter-based Philox generators.  Independent streams are carved out of a
root seed by hashing the root together with a path of string/integer labels:

    child_seed(seed, "clean", 7)  ->  uint64

The derivation is SHA-256 over the ASCII rendering ``"<seed>/clean/7"``,
taking the first 8 digest bytes little-endian.  This is stable across
platforms and Python versions, so any run is reproducible from its config
alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root: int, *labels: object) -> int:
    """Derive an independent 64-bit seed from ``root`` and a label path."""
    text = "/".join([str(int(root))] + [str(l) for l in labels])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(root: int, *labels: object) -> np.random.Generator:
    """Philox generator for the stream named by ``labels`` under ``root``."""
    seed = child_seed(root, *labels) if labels else int(root)
    return np.random.Generator(np.random.Philox(key=seed))
