"""Splittable, counter-based random streams.

All randomness in the package flows from a single integer seed. Each
sub-task derives its own independent stream from (seed, purpose label),
so parallel or reordered work cannot perturb another task's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Derive an independent Philox stream for (seed, label)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), _label_key(label)])
    return np.random.Generator(np.random.Philox(ss))
