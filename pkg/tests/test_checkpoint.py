import struct

import numpy as np
import pytest

from mhgd.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
    decode,
    encode,
    make_checkpoint,
    rng_from_words,
    rng_to_words,
)


def _sample(rng):
    gen = np.random.default_rng(123)
    gen.random(7)
    return make_checkpoint(
        {"conv.weight": rng.normal(size=(3, 3, 2, 4)), "fc.bias": np.zeros(5)},
        buffers={"bn.running_var": np.ones(4)},
        velocity={"conv.weight": rng.normal(size=(3, 3, 2, 4))},
        epoch=7, rng=gen)


def test_round_trip_preserves_every_array(tmp_path, rng):
    ckpt = _sample(rng)
    checkpoint_save(ckpt, tmp_path / "a.ckpt")
    back = checkpoint_load(tmp_path / "a.ckpt")
    assert list(back.arrays) == list(ckpt.arrays)
    for k in ckpt.arrays:
        assert back.arrays[k].tobytes() == np.asarray(ckpt.arrays[k]).tobytes()
    assert back.epoch == 7


def test_save_load_save_is_byte_identical(tmp_path, rng):
    checkpoint_save(_sample(rng), tmp_path / "a.ckpt")
    checkpoint_save(checkpoint_load(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_rng_state_survives_words():
    gen = np.random.default_rng(2024)
    gen.standard_normal(3)
    restored = rng_from_words(rng_to_words(gen))
    np.testing.assert_array_equal(restored.random(10), gen.random(10))


def test_rng_round_trip_through_file(tmp_path, rng):
    ckpt = _sample(rng)
    checkpoint_save(ckpt, tmp_path / "c.ckpt")
    gen = rng_from_words(checkpoint_load(tmp_path / "c.ckpt").arrays["rng/pcg64"])
    ref = np.random.default_rng(123)
    ref.random(7)
    np.testing.assert_array_equal(gen.random(5), ref.random(5))


def test_bad_magic_and_version():
    good = encode(Checkpoint({"param/x": np.ones(2, np.float32)}))
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"NOPE" + good[4:])
    bumped = MAGIC + struct.pack("<I", 99) + good[8:]
    with pytest.raises(CheckpointError, match="expected 1, found 99"):
        decode(bumped)


def test_truncated_and_trailing_bytes():
    good = encode(Checkpoint({"param/x": np.ones(4, np.float32)}))
    with pytest.raises(CheckpointError):
        decode(good[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(good + b"\0")


def test_non_float32_parameter_is_rejected():
    with pytest.raises(CheckpointError):
        encode(Checkpoint({"param/x": np.ones(2, np.float64)}))
