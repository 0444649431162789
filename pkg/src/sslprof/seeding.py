"""Deterministic RNG stream derivation.

Every random draw in the package comes from a generator keyed by a base
seed plus a structural path (purpose tag, plate, well, step, ...), so
adding work units never perturbs existing streams and results are
reproducible across runs and worker counts.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream purpose tags. Values are part of the reproducibility contract:
# changing them changes every derived stream.
TAG_ASSIGNMENT = 1
TAG_LINE = 2
TAG_PLATE = 3
TAG_PLACEMENT = 4
TAG_SITE = 5
TAG_INIT = 6
TAG_EPOCH = 7
TAG_VIEW = 8
TAG_FOLDS = 9


def rng_for(seed: int, *key: int) -> np.random.Generator:
    entropy = [seed & _MASK64] + [int(k) & _MASK64 for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))
