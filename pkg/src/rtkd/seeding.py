"""Named, non-overlapping RNG streams.

Every stochastic subsystem draws from its own PCG64 stream keyed by
``(user seed, stream tag, *extras)``. Keeping the streams disjoint means,
for example, that adding attention parameters to a run does not perturb
model initialization or batch shuffling, which is what makes the
mode-reduction checks bit-exact.
"""

from __future__ import annotations

import numpy as np

MODEL_INIT = 11
ATTENTION_INIT = 13
SHUFFLE = 17
AUGMENT = 19
SYNTH_DATA = 23


def stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(tag), *[int(e) for e in extra]])
