"""Counter-based random streams with deterministic per-episode substreams.

All stochastic code in the package draws from a ``numpy.random.Generator``
backed by the Philox counter-based bit generator. Substreams are keyed by
``(master_seed, index)``, so episode ``i`` of a Monte Carlo campaign sees
the same draws no matter how many episodes run, in what order, or on how
many workers.
"""

from __future__ import annotations

import numpy as np

# Public alias: every function in the package that takes randomness takes one
# of these, single-owner (never shared between concurrent episodes).
RandomStream = np.random.Generator

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def master_stream(seed: int) -> RandomStream:
    """Top-level stream for one-off sampling (not campaign episodes)."""
    return substream(seed, 0)


def substream(seed: int, index: int) -> RandomStream:
    """Independent stream derived from ``(seed, index)``.

    Distinct ``(seed, index)`` pairs map to distinct Philox keys, which the
    generator guarantees to be statistically independent. Derivation is pure:
    calling twice yields generators producing identical sequences.
    """
    if index < 0:
        raise ValueError("substream index must be nonnegative")
    key = np.array([np.uint64(seed) & _MASK64, np.uint64(index) & _MASK64])
    return np.random.Generator(np.random.Philox(key=key))
