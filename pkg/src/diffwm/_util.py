from __future__ import annotations

from collections.abc import Sequence

import numpy as np

Rng = np.random.Generator | Sequence[np.random.Generator]


def normal(rng: Rng, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal draws of ``shape``.

    A sequence of generators gives one independent stream per leading row, so
    a batch of trials draws exactly what each trial would draw on its own.
    """
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    if len(shape) < 1 or len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} generators for leading dimension {shape[:1]}")
    return np.stack([r.standard_normal(shape[1:]) for r in rng]) if len(rng) else np.zeros(shape)


def rowdot(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``x @ m.T`` along the last axis of ``x``.

    Written as a broadcast multiply-and-sum instead of BLAS so each output row
    is bit-identical regardless of how many rows are batched together.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    return (x[..., None, :] * m).sum(axis=-1)
