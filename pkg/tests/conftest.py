"""Shared fixtures: toy corpus and the (expensive) pretrained checkpoints.

Set ABLM_TEST_CACHE=1 to reuse checkpoints across pytest runs (development
convenience; the default always retrains).
"""

import os
import sys
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ablm.model import ModelConfig
from ablm.seqio import read_records
from ablm.trainer import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

ACCEPT_MODEL_CONFIG = dict(n_layers=2, n_heads=2, d_hidden=64, d_ff=256, max_len=96)
ACCEPT_SEED = 1
# Desk-scale schedule knobs: warmup shortened from the full-scale default
# (2,000 warmup inside a 2,000-step run would never leave the ramp) and a
# batch size sized to the 64-record corpus.
STAGE1_TRAIN = dict(warmup_steps=100, total_steps=2000, batch_size=32, seed=ACCEPT_SEED)
STAGE2_TRAIN = dict(warmup_steps=100, total_steps=2000, batch_size=8, seed=ACCEPT_SEED)

_CACHE_DIR = Path(__file__).parent / ".cache"


def _cached(name: str, build):
    if os.environ.get("ABLM_TEST_CACHE") != "1":
        return build()[0]
    _CACHE_DIR.mkdir(exist_ok=True)
    path = _CACHE_DIR / f"{name}.ckpt"
    if path.exists():
        return load_checkpoint(path)
    ckpt = build()[0]
    save_checkpoint(ckpt, path)
    return ckpt


@pytest.fixture(scope="session")
def toy_records():
    return read_records(str(resources.files("ablm.data").joinpath("toy_records.tsv")))


@pytest.fixture(scope="session")
def accept_model_config():
    return ModelConfig(**ACCEPT_MODEL_CONFIG)


@pytest.fixture(scope="session")
def stage1_ckpt(toy_records, accept_model_config):
    corpus_1d = [r.residues.residues for r in toy_records]
    corpus_3di = [r.struct3di for r in toy_records]

    def build():
        cfg = TrainConfig(stage="I", **STAGE1_TRAIN)
        return train_stage1(corpus_1d, corpus_3di, cfg, accept_model_config)

    return _cached("stage1", build)


@pytest.fixture(scope="session")
def stage2_ckpt(toy_records, stage1_ckpt):
    def build():
        cfg = TrainConfig(stage="II", **STAGE2_TRAIN)
        return train_stage2(toy_records, stage1_ckpt, cfg)

    return _cached("stage2", build)


@pytest.fixture(scope="session")
def stage2_no_clr_ckpt(toy_records, stage1_ckpt):
    def build():
        cfg = TrainConfig(stage="II", use_clr=False, **STAGE2_TRAIN)
        return train_stage2(toy_records, stage1_ckpt, cfg)

    return _cached("stage2_no_clr", build)


@pytest.fixture(scope="session")
def stage2_no_ssm_ckpt(toy_records, stage1_ckpt):
    def build():
        cfg = TrainConfig(stage="II", use_ssm=False, **STAGE2_TRAIN)
        return train_stage2(toy_records, stage1_ckpt, cfg)

    return _cached("stage2_no_ssm", build)
