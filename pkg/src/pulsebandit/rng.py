"""Deterministic labeled random streams.

Every source of randomness in an experiment is a named substream derived
from (base_seed, trial_index, *labels).  String labels are hashed with
SHA-256 so the derivation is stable across platforms and Python versions;
integer labels pass through unchanged.  Streams with different labels are
statistically independent, so adding an agent to a trial can never perturb
the environment's context stream.
"""

import hashlib

import numpy as np

from .errors import ParameterError

__all__ = ["label_words", "substream", "seed_sequence"]


def label_words(label):
    """Map one label (int or str) to a list of uint32 words."""
    if isinstance(label, (bool, float)):
        raise ParameterError(f"labels must be int or str, got {type(label).__name__}")
    if isinstance(label, (int, np.integer)):
        v = int(label)
        if v < 0:
            raise ParameterError("integer labels must be nonnegative")
        words = []
        while True:
            words.append(v & 0xFFFFFFFF)
            v >>= 32
            if v == 0:
                return words
    if isinstance(label, str):
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 8, 4)]
    raise ParameterError(f"labels must be int or str, got {type(label).__name__}")


def seed_sequence(base_seed, *labels):
    """SeedSequence for the substream named by `labels` under `base_seed`."""
    entropy = label_words(base_seed)
    for lab in labels:
        entropy.extend(label_words(lab))
    return np.random.SeedSequence(entropy)


def substream(base_seed, *labels):
    """Independent Generator for the named substream."""
    return np.random.default_rng(seed_sequence(base_seed, *labels))
