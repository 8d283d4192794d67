"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import hashlib

import numpy as np


def make_rng(seed: int, *path: str | int) -> np.random.Generator:
    """Generator for ``seed`` and an optional named sub-stream.

    Distinct paths give statistically independent streams, so each pipeline
    stage can draw its own randomness without consuming another's.
    """
    key = tuple(_key(p) for p in path)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return rng.spawn(n)


def _key(part: str | int) -> int:
    if isinstance(part, int):
        return part
    return int.from_bytes(hashlib.sha256(part.encode()).digest()[:4], "little")
