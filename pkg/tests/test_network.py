"""Residual network builder: insertion sites, partitions, head swap, checkpoints."""

import numpy as np
import pytest

from ftmnet.autograd import Tensor
from ftmnet.errors import ConfigError, DimensionError
from ftmnet.network import (
    NetworkConfig,
    build_model,
    buffer_checksum,
    desk_config,
    forward_model,
    partition_checksum,
    partition_params,
    reinit_head,
    resnet34_config,
)


def eval_logits(model, batch):
    return forward_model(model, Tensor(batch), mode="eval").data


def rand_batch(n, size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 3, size, size)).astype(np.float32)


def test_desk_config_shape():
    cfg = desk_config(num_classes=8)
    assert cfg.stem_channels == 16
    assert cfg.stage_channels == (16, 32, 64)
    assert cfg.blocks_per_stage == (2, 2, 2)
    assert cfg.ftm_sites == (2,)


def test_desk_ftm_slot_is_last_stage_last_block():
    model = build_model(desk_config(num_classes=8), seed=0)
    assert "s2.ftm.gamma" in model.params
    assert "s2.ftm.beta" in model.params
    assert model.params["s2.ftm.gamma"].shape == (64,)
    # 2C parameters at the C=64 site
    ftm_count = sum(model.params[n].size for n in partition_params(model)["ftm"])
    assert ftm_count == 128


def test_build_rejects_bad_config():
    cfg = NetworkConfig(
        stem_channels=16,
        stage_channels=(16, 32),
        blocks_per_stage=(2, 2),
        num_classes=4,
        ftm_sites=(5,),
        image_size=32,
    )
    with pytest.raises(ConfigError):
        build_model(cfg, seed=0)


def test_build_is_deterministic():
    a = build_model(desk_config(num_classes=8), seed=3)
    b = build_model(desk_config(num_classes=8), seed=3)
    assert sorted(a.params) == sorted(b.params)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name


def test_identity_at_init_matches_ftm_free_model():
    with_ftm = build_model(desk_config(num_classes=8), seed=1)
    without = build_model(desk_config(num_classes=8, ftm=False), seed=1)
    batch = rand_batch(16, 32, seed=5)
    delta = np.abs(eval_logits(with_ftm, batch) - eval_logits(without, batch))
    assert delta.max() < 1e-6


def test_forward_single_sample_shape_and_finiteness():
    model = build_model(desk_config(num_classes=8), seed=0)
    out = eval_logits(model, rand_batch(1, 32))
    assert out.shape == (1, 8)
    assert np.all(np.isfinite(out))


def test_forward_rejects_wrong_spatial_size():
    model = build_model(desk_config(num_classes=8), seed=0)
    with pytest.raises(DimensionError):
        eval_logits(model, rand_batch(1, 48))


def test_eval_logits_invariant_to_batch_composition():
    model = build_model(desk_config(num_classes=8), seed=2)
    batch = rand_batch(8, 32, seed=9)
    whole = eval_logits(model, batch)
    alone = eval_logits(model, batch[3:4])
    assert np.max(np.abs(whole[3:4] - alone)) < 1e-5


def test_partition_is_exhaustive_and_disjoint():
    model = build_model(desk_config(num_classes=8), seed=0)
    parts = partition_params(model)
    assert set(parts) == {"backbone", "ftm", "head"}
    union = parts["backbone"] | parts["ftm"] | parts["head"]
    assert union == set(model.params)
    assert not (parts["backbone"] & parts["ftm"])
    assert not (parts["backbone"] & parts["head"])
    assert not (parts["ftm"] & parts["head"])
    assert parts["ftm"] == {"s2.ftm.gamma", "s2.ftm.beta"}
    assert parts["head"] == {"head.w", "head.b"}


def test_no_ftm_config_has_empty_ftm_partition():
    model = build_model(desk_config(num_classes=8, ftm=False), seed=0)
    assert partition_params(model)["ftm"] == set()


def test_resnet34_shape_census():
    """One FTM site at the final stage stays under 0.01% of the weights."""
    cfg = resnet34_config(num_classes=45)
    assert cfg.stage_channels == (64, 128, 256, 512)
    assert cfg.blocks_per_stage == (3, 4, 6, 3)
    model = build_model(cfg, seed=0)
    parts = partition_params(model)
    total = model.param_count()
    ftm_count = sum(model.params[n].size for n in parts["ftm"])
    assert ftm_count == 1024  # 2C at C=512
    assert 2.0e7 < total < 2.3e7
    assert ftm_count / total < 1e-4
    assert "s3.ftm.gamma" in model.params


def test_reinit_head_swaps_only_the_head():
    model = build_model(desk_config(num_classes=45), seed=0)
    before_backbone = partition_checksum(model, "backbone")
    before_ftm = partition_checksum(model, "ftm")
    swapped = reinit_head(model, 15, seed=7)
    assert swapped.params["head.w"].shape == (15, 64)
    assert swapped.params["head.b"].shape == (15,)
    assert partition_checksum(swapped, "backbone") == before_backbone
    assert partition_checksum(swapped, "ftm") == before_ftm
    assert buffer_checksum(swapped) == buffer_checksum(model)
    # original untouched
    assert model.params["head.w"].shape == (45, 64)


def test_reinit_head_deterministic_and_forward_shape():
    model = build_model(desk_config(num_classes=8), seed=0)
    a = reinit_head(model, 5, seed=3)
    b = reinit_head(model, 5, seed=3)
    assert np.array_equal(a.params["head.w"].data, b.params["head.w"].data)
    out = eval_logits(a, rand_batch(2, 32))
    assert out.shape == (2, 5)


def test_downsampling_blocks_have_projection_shortcuts():
    model = build_model(desk_config(num_classes=8), seed=0)
    # channel count changes entering stages 1 and 2, not stage 0
    assert "s1.b0.down.conv.w" in model.params
    assert "s2.b0.down.conv.w" in model.params
    assert "s0.b0.down.conv.w" not in model.params
    assert model.params["s1.b0.down.conv.w"].shape == (32, 16, 1, 1)


def test_buffer_checksum_tracks_running_stats():
    model = build_model(desk_config(num_classes=8), seed=0)
    before = buffer_checksum(model)
    copy = model.copy()
    copy.buffers["s0.b0.bn1.mean"] = copy.buffers["s0.b0.bn1.mean"] + 0.5
    assert buffer_checksum(copy) != before
    assert buffer_checksum(model) == before
