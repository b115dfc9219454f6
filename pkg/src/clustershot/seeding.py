"""Derivation of independent RNG streams from a single experiment seed.

Every stochastic choice in the pipeline draws from a stream addressed by
(seed, domain, *path). A stream depends only on its address, never on how
many draws other streams made, so checkpoint resume and parallel episode
evaluation reproduce a straight run exactly.
"""

from __future__ import annotations

import numpy as np

# Domain tags. Append new ones; never renumber, or old configs stop
# reproducing.
DOMAIN_INIT = 0
DOMAIN_PRETRAIN_BATCH = 1
DOMAIN_VALIDATION = 2
DOMAIN_EVAL = 3
DOMAIN_SYNTH = 4
DOMAIN_INSPECT = 5


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(path)))


def derived_int(seed: int, *path: int) -> int:
    """A single uint64 derived from (seed, *path), e.g. for torch generators."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
