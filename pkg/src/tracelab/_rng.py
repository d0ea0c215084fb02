"""Deterministic random-stream derivation.

Every stream is a pure function of an integer seed plus a tuple of integer
keys, so runs can be split across workers without changing results.
"""

from __future__ import annotations

import numpy as np

# paths are grouped into fixed blocks; a block's stream depends only on (seed, block index)
PATH_BLOCK = 4096


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def path_blocks(n_paths: int) -> list[slice]:
    return [slice(s, min(s + PATH_BLOCK, n_paths)) for s in range(0, n_paths, PATH_BLOCK)]


def block_streams(seed: int, n_paths: int, tag: int) -> list[tuple[slice, np.random.Generator]]:
    """One generator per path block, keyed by (seed, tag, block index)."""
    return [(sl, stream(seed, tag, b)) for b, sl in enumerate(path_blocks(n_paths))]
