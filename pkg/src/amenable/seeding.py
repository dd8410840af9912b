"""Root-seed derivation of independent random streams.

Every stochastic component draws from its own child of a single root seed:

    child = SeedSequence(entropy=root, spawn_key=(STREAMS[name], *extra))

so adding draws to one stream never perturbs another, and a partial rerun of
one component reproduces the same numbers.
"""

from __future__ import annotations

import numpy as np
import torch

STREAMS = {
    "data": 0,
    "init": 1,
    "actions": 2,
    "bootstrap": 3,
    "batches": 4,
    "env": 5,
    "rl": 6,
    "adapt": 7,
}


def child_seed_sequence(root: int, name: str, *extra: int) -> np.random.SeedSequence:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.SeedSequence(entropy=int(root), spawn_key=(STREAMS[name], *map(int, extra)))


def child_rng(root: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(child_seed_sequence(root, name, *extra))


def child_int(root: int, name: str, *extra: int) -> int:
    """A 63-bit integer seed for libraries that want a plain int."""
    return int(child_seed_sequence(root, name, *extra).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(root: int, name: str, *extra: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(child_int(root, name, *extra))
    return gen
