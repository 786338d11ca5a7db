"""Sub-seed derivation from a single root seed.

Every random stream in a run is seeded by ``derive_seed(root, label)``, i.e. the
first 64-bit word of ``numpy.random.SeedSequence([root, code(label)])``. Labels
and their codes are fixed below; adding a label never changes existing streams.
"""
from __future__ import annotations

import numpy as np

LABELS = {
    "pattern": 1,
    "clicks": 2,
    "tags": 3,
    "drift_pic": 4,
    "drift_fiber": 5,
    "tagged": 6,
}


def derive_seed(root: int, label: str) -> int:
    try:
        code = LABELS[label]
    except KeyError:
        raise KeyError(f"unknown seed label {label!r}; known: {sorted(LABELS)}") from None
    state = np.random.SeedSequence([int(root), code]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
