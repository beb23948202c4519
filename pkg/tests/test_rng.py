import numpy as np
import pytest

from pulsebandit import ParameterError, label_words, seed_sequence, substream


def test_same_labels_same_stream():
    a = substream(123, "env", 4).standard_normal(8)
    b = substream(123, "env", 4).standard_normal(8)
    assert np.array_equal(a, b)


def test_different_labels_different_streams():
    seen = []
    for labels in [("env", 0), ("env", 1), ("agent", 0), ("mc", 0), (0, "env")]:
        seen.append(tuple(substream(7, *labels).standard_normal(4)))
    assert len(set(seen)) == len(seen)


def test_base_seed_matters():
    a = substream(1, "x").standard_normal(4)
    b = substream(2, "x").standard_normal(4)
    assert not np.array_equal(a, b)


def test_label_words_int_passthrough():
    assert label_words(5) == [5]
    assert label_words(0) == [0]


def test_label_words_string_stable():
    # frozen: sha256("env")[:8] little-endian as two 32-bit words
    import hashlib
    import struct

    digest = hashlib.sha256(b"env").digest()[:8]
    lo, hi = struct.unpack("<II", digest)
    assert label_words("env") == [lo, hi]


def test_label_words_rejects_floats_and_bools():
    with pytest.raises(ParameterError):
        label_words(1.5)
    with pytest.raises(ParameterError):
        label_words(True)


def test_seed_sequence_spawns_independent():
    ss = seed_sequence(9, "trial", 3)
    rng = np.random.default_rng(ss)
    assert isinstance(rng.standard_normal(), float)


def test_nested_labels_do_not_collide():
    # ("a", "bc") and ("ab", "c") hash different words per label
    x = substream(0, "a", "bc").standard_normal(4)
    y = substream(0, "ab", "c").standard_normal(4)
    assert not np.array_equal(x, y)
