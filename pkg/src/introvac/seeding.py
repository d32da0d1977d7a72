"""Named random sub-streams derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch

STREAMS = ("data", "init", "train", "langevin", "generate")


def derive_seed(seed: int, stream: str, *extra: int) -> int:
    """Stable 63-bit seed for sub-stream ``stream`` (plus optional integer keys)."""
    key = (zlib.crc32(stream.encode()),) + tuple(int(e) for e in extra)
    state = np.random.SeedSequence(int(seed), spawn_key=key).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def generator_for(seed: int, stream: str, *extra: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream, *extra))
