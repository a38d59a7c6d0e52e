"""Deterministic seed derivation.

Every stochastic component takes a root seed plus string/int tags and builds
its Generator through here, so reruns with the same config are bit-identical
and component streams never alias.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_entropy(tag: object) -> int:
    digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed_sequence(root_seed: int, *tags: object) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF] + [_tag_entropy(t) for t in tags])


def spawn_rng(root_seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root_seed, *tags))
