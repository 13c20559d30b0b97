"""Deterministic random-number plumbing.

Every stochastic entry point takes one integer seed and derives named
substreams from it, so adding a consumer never perturbs the draws of an
existing one. Substream derivation hashes the name into the seed sequence,
which keeps streams stable across platforms and numpy versions that share
the Philox/PCG bit streams.
"""

import hashlib

import numpy as np


def _name_tag(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the substream `name` of run seed `seed`."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _name_tag(name)])
    return np.random.default_rng(seq)


def as_generator(seed_or_rng) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
