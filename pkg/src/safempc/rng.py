"""Deterministic random-stream derivation from a single master seed.

Every component that needs randomness asks for a stream addressed by a
path of labels, e.g. ``stream(seed, "cem", episode, attempt, rollout)``.
Streams are derived through ``numpy.random.SeedSequence`` entropy mixing
(string labels are hashed with SHA-256 first), so the draw order of one
stream can never perturb another and results are independent of how work
is scheduled across threads.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "stream_seed"]


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream path labels must be non-negative, got {label}")
        return int(label)
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream path labels must be int or str, got {type(label).__name__}")


def stream_seed(master_seed: int, *path) -> np.random.SeedSequence:
    """Derive the SeedSequence for the stream addressed by ``path``."""
    entropy = [_label_to_int(master_seed)] + [_label_to_int(p) for p in path]
    return np.random.SeedSequence(entropy)


def stream(master_seed: int, *path) -> np.random.Generator:
    """Return an independent Generator for the stream addressed by ``path``."""
    return np.random.default_rng(stream_seed(master_seed, *path))
