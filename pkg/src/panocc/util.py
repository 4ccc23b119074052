"""Small shared helpers: stable seeding and unit vectors."""

from __future__ import annotations

import zlib

import numpy as np


def stable_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Generator keyed by a seed plus string/int qualifiers.  Strings are
    hashed with crc32 so the stream is stable across processes."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode("utf-8")))
        else:
            entropy.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(entropy)


def unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def class_embedding(name: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit embedding for a class name."""
    return unit_vector(stable_rng(seed, "class-embedding", name), dim)
