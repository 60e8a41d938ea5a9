"""Deterministic RNG streams.

Every run owns one integer seed. Each consumer (parameter init, dropout
masks, noise injection, shuffling, ...) gets its own child generator so
that, say, turning dropout on cannot perturb the initialisation draws.
Child streams are derived through SeedSequence spawn keys, which is
stable across platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

# Fixed consumer ids. Append only; reordering changes every derived stream.
_CONSUMERS = {
    "init": 0,
    "dropout": 1,
    "noise": 2,
    "shuffle": 3,
    "synth": 4,
    "probe": 5,
}


def stream(seed: int, consumer: str) -> np.random.Generator:
    """Child generator for one consumer of the run seed."""
    try:
        key = _CONSUMERS[consumer]
    except KeyError:
        raise KeyError(f"unknown rng consumer {consumer!r}; known: {sorted(_CONSUMERS)}")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
