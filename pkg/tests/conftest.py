"""Shared fixtures.

The expensive artifacts (synthetic domain pair, stage-1 source model,
one adapted model) are built once per session and shared by the unit
tests and the acceptance gate. Everything is seeded, so sharing does
not couple test outcomes.
"""

from dataclasses import replace

import numpy as np
import pytest

from ftmnet.cli import main as cli_main
from ftmnet.data import fast_shift_config, synth_domain_pair
from ftmnet.network import build_model, desk_config, reinit_head
from ftmnet.training import (
    adapt_ftm,
    desk_stage1,
    desk_stage2_ftm,
    sample_shots,
    train_source,
    trial_seed,
)

BASE_SEED = 0


@pytest.fixture(scope="session")
def shift_cfg():
    # 4 coarse families so the same pair also feeds the mosaic pipeline
    return fast_shift_config(seed=BASE_SEED, n_target_coarse=4)


@pytest.fixture(scope="session")
def domain_pair(shift_cfg):
    return synth_domain_pair(shift_cfg)


@pytest.fixture(scope="session")
def source_ds(domain_pair):
    return domain_pair[0]


@pytest.fixture(scope="session")
def target_ds(domain_pair):
    return domain_pair[1]


@pytest.fixture(scope="session")
def source_model(source_ds):
    model = build_model(
        desk_config(num_classes=source_ds.num_classes, image_size=source_ds.image_size),
        seed=BASE_SEED,
    )
    trained, history = train_source(model, source_ds, desk_stage1(seed=BASE_SEED))
    assert history[-1]["train_loss"] < 0.1, "source training failed to converge"
    return trained


@pytest.fixture(scope="session")
def adapted_model(source_model, target_ds):
    s = trial_seed(BASE_SEED, 10, 0)
    episode = sample_shots(target_ds, 10, seed=s)
    base = reinit_head(source_model, target_ds.num_classes, seed=s)
    adapted, _ = adapt_ftm(base, episode, replace(desk_stage2_ftm(), seed=s))
    return adapted


TINY_CFG = """\
data.kind=synthetic
data.source_classes=6
data.coarse=4
data.subs=2
data.image_size=24
data.per_class=40
data.seed=0
train.epochs=3
train.batch=32
train.lr=0.001
adapt.epochs=4
adapt.shots=3
"""


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Small config file plus a CLI-trained source checkpoint for CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    rc = cli_main(["train-source", "--config", str(cfg), "--out", str(root / "src")])
    assert rc == 0
    ckpt = root / "src" / "source.ckpt"
    assert ckpt.exists()
    return {"root": root, "config": cfg, "ckpt": ckpt}
