"""Checkpoint container: lossless round trips and corruption handling."""

import struct

import numpy as np
import pytest

from ftmnet.autograd import Tensor
from ftmnet.checkpoint import load_checkpoint, save_checkpoint
from ftmnet.errors import CheckpointFormatError
from ftmnet.network import build_model, desk_config, forward_model


@pytest.fixture()
def small_model():
    model = build_model(desk_config(num_classes=5, image_size=16), seed=4)
    # non-trivial buffers and metadata so the round trip is not vacuous
    for name in model.buffers:
        model.buffers[name] = model.buffers[name] + np.float32(0.25)
    model.meta["classes"] = "a|b|c|d|e"
    model.meta["taxonomy"] = "a=x|b=x|c=y|d=y|e=y"
    return model


def test_round_trip_restores_everything(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    loaded = load_checkpoint(path)

    assert loaded.config == small_model.config
    assert loaded.meta == small_model.meta
    assert loaded.partition == small_model.partition
    assert sorted(loaded.params) == sorted(small_model.params)
    for name in small_model.params:
        assert np.array_equal(loaded.params[name].data, small_model.params[name].data), name
    assert sorted(loaded.buffers) == sorted(small_model.buffers)
    for name in small_model.buffers:
        assert np.array_equal(loaded.buffers[name], small_model.buffers[name]), name


def test_round_trip_preserves_logits_bitwise(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    rng = np.random.default_rng(1)
    batch = Tensor(rng.uniform(size=(3, 3, 16, 16)).astype(np.float32))
    before = forward_model(small_model, batch, mode="eval").data
    save_checkpoint(small_model, path)
    after = forward_model(load_checkpoint(path), batch, mode="eval").data
    assert np.array_equal(before, after)


def test_save_is_deterministic(small_model, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(small_model, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupt_magic_rejected(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"JUNK"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError) as exc:
        load_checkpoint(path)
    assert exc.value.offset == 0


def test_unsupported_version_rejected(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointFormatError) as exc:
        load_checkpoint(path)
    assert exc.value.offset == 4


def test_truncation_rejected_with_offset(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointFormatError) as exc:
        load_checkpoint(path)
    assert 0 < exc.value.offset <= len(blob) // 2


def test_trailing_garbage_rejected(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_file_size_matches_parameter_census(small_model, tmp_path):
    """Recount the container byte for byte from the model's own census."""
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)

    entries = [(n, t.data) for n, t in small_model.params.items()]
    entries += list(small_model.buffers.items())
    expect = 4 + 4  # magic + version
    cfg_lines = 7 + len(small_model.meta)
    cfg_text_len = path.read_bytes()[8:12]
    expect += 4 + struct.unpack("<I", cfg_text_len)[0]
    expect += 4  # entry count
    for name, arr in entries:
        expect += 2 + len(name.encode()) + 3 + 4 * arr.ndim + 4 * arr.size
    assert path.stat().st_size == expect
    # sanity on the config block itself: one line per field plus meta
    cfg_blob = path.read_bytes()[12 : 12 + struct.unpack("<I", cfg_text_len)[0]]
    assert cfg_blob.decode().count("\n") == cfg_lines


def test_scalar_payload_dominates_file_size(small_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    n_scalars = small_model.param_count() + sum(a.size for a in small_model.buffers.values())
    assert 4 * n_scalars < path.stat().st_size < 4 * n_scalars + 8192
