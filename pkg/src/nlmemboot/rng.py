"""Keyed random streams.

Every random draw in the package comes from :func:`stream`, a Philox
(counter-based) generator whose key is derived from a master seed plus a tuple
of integer or string labels through :class:`numpy.random.SeedSequence`.  Two
calls with the same labels give the same stream no matter what else was drawn
before, which is what makes replicates, bootstrap samples and worker
processes reproducible in isolation.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    """Return an independent generator keyed by ``(seed, *labels)``."""
    key = tuple(_label_to_int(lab) for lab in labels)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *labels) -> int:
    """Derive a 63-bit integer seed from ``(seed, *labels)``."""
    key = tuple(_label_to_int(lab) for lab in labels)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return (hi << 31) ^ lo
