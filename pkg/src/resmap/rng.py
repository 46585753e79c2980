"""Deterministic random streams.

Every randomized routine in this package takes an explicit integer seed and
derives an independent stream from it with :func:`stream`. Streams are built
on the counter-based Philox generator, so two streams with different paths
never overlap and a (seed, path) pair always yields the same byte sequence,
independent of call order or platform.
"""

from __future__ import annotations

import numpy as np

# Fixed path roots, one per subsystem. Keeping them in one table makes it
# easy to see that no two call sites share a stream by accident.
HEIGHT = 1
SOIL = 2
MANAGEMENT = 3
RESIDUE = 4
RENDER = 5
ANNOTATE = 6
TILE = 7
INIT = 8
TRAIN = 9
PREDICT = 10


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *path)``.

    ``path`` elements must be non-negative integers; they name the consumer
    (one of the constants above) plus any indices such as tile number or
    annotator number.
    """
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    for p in path:
        if not isinstance(p, (int, np.integer)) or p < 0:
            raise ValueError(f"stream path elements must be non-negative ints, got {path!r}")
    ss = np.random.SeedSequence(entropy=int(seed) & (2**128 - 1), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seed=ss))


def derive_seed(seed: int, *path: int) -> int:
    """Fold (seed, path) into a fresh 63-bit seed for a nested component."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**128 - 1), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
