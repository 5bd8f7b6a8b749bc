"""Deterministic seed derivation.

Every random draw in the package comes from a generator seeded by
``derive_seed(base_seed, *tags)`` so that any value is a pure function of
the base seed and a stable string path, never of global RNG state or of
what else was created before it.
"""

import hashlib

import torch


def derive_seed(base_seed: int, *tags) -> int:
    """Stable 63-bit seed from a base seed and a sequence of tags."""
    payload = ":".join([str(base_seed), *(str(t) for t in tags)]).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator_for(base_seed: int, *tags) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base_seed, *tags))
    return g
