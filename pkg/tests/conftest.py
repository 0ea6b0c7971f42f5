import dataclasses

import pytest
import torch

from regionssl.config import ModelConfig, RunConfig
from regionssl.data import SyntheticFaceSpec, SyntheticSource
from regionssl.networks import build_model_pair


def tiny_model_config(**kwargs) -> ModelConfig:
    base = dict(encoder="tiny", embedding_dim=32, projector_hidden_dim=32,
                predictor_hidden_dim=32, num_regions=8, decoder_dim=32,
                decoder_depth=1, decoder_heads=2)
    base.update(kwargs)
    return ModelConfig(**base)


def tiny_run_config(tmp_path, **train_kwargs) -> RunConfig:
    cfg = RunConfig()
    train = dict(total_steps=4, batch_size=4, warmup_steps=2,
                 checkpoint_every=2, base_learning_rate=1e-3,
                 output_dir=str(tmp_path / "run"))
    train.update(train_kwargs)
    cfg = dataclasses.replace(
        cfg,
        model=tiny_model_config(),
        train=dataclasses.replace(cfg.train, **train),
        data=dataclasses.replace(cfg.data, n_images=16, image_size=64),
        augmentation=dataclasses.replace(cfg.augmentation, crop_size=64))
    return cfg


@pytest.fixture
def tiny_pair():
    return build_model_pair(tiny_model_config(), seed=0)


@pytest.fixture
def small_source():
    return SyntheticSource(SyntheticFaceSpec(canvas_size=64), n_images=16, seed=0)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
