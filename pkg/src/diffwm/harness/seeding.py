"""Per-trial seeding.

``derived_seed = splitmix64(master_seed XOR trial_id)`` where ``splitmix64``
is the SplitMix64 output finalizer (all arithmetic mod 2^64)::

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

Each trial then draws from three independent streams seeded by
``SeedSequence(derived_seed, spawn_key=...)``: content (0,), message (1,)
and attack (2, attack_seed).  Content and message streams ignore the attack
settings, so every attack mode sees the same images and payloads.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derived_seed(master_seed: int, trial_id: int) -> int:
    return splitmix64((master_seed ^ trial_id) & MASK64)


def trial_streams(seed: int, attack_seed: int = 0):
    """``(content_rng, message_rng, attack_rng)`` for one trial."""
    mk = lambda *k: np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=k)))
    return mk(0), mk(1), mk(2, attack_seed)
