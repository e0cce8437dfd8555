"""Equal-length batching: sequences in a batch share one length, so no padding is needed."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np


def length_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Group indices by exact length and cut each group into batches of at most ``batch_size``.

    With ``rng`` the membership within each length group and the batch order
    are shuffled; without it the order is the natural one.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    groups: dict[int, list[int]] = defaultdict(list)
    for i, n in enumerate(lengths):
        groups[int(n)].append(i)
    batches = []
    for n in sorted(groups):
        idx = np.asarray(groups[n], dtype=np.int64)
        if rng is not None:
            idx = rng.permutation(idx)
        for start in range(0, len(idx), batch_size):
            batches.append(idx[start:start + batch_size])
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches
