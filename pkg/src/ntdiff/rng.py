"""Named random sub-streams derived from one integer seed."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for the stream ``names`` under ``seed``; independent of call order."""
    key = repr((int(seed),) + tuple(names)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


def numpy_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def torch_gen(seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *names))
    return g
