"""Counter-based random streams.

Every random draw in the pipeline comes from a generator keyed by
``(master seed, purpose tag, index)`` so work can be split across
utterances or workers without changing results.
"""

from __future__ import annotations

import contextlib
import zlib

import numpy as np
import torch


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _tag(purpose), *map(int, index)]))


def sub_seed(seed: int, purpose: str, *index: int) -> int:
    ss = np.random.SeedSequence([int(seed), _tag(purpose), *map(int, index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@contextlib.contextmanager
def torch_seeded(seed: int):
    """Run a block (typically module construction) under a fixed torch seed
    without disturbing the caller's global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
