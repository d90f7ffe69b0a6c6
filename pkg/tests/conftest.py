"""Shared fixtures: a tiny phantom corpus and a matching train config."""

import numpy as np
import pytest

from t3d.encoders import ModelConfig
from t3d.phantom import default_phantom_spec, synth_corpus
from t3d.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = default_phantom_spec(grid_dims=(16, 16, 8), n_shapes=2)
    synth_corpus(spec, n=16, seed=11, out_dir=out)
    return out


@pytest.fixture(scope="session")
def tiny_manifest(tiny_corpus_dir):
    return tiny_corpus_dir / "manifest.jsonl"


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(visual_channels=(4, 8), gn_groups=4, vocab_size=22, d_r=16,
                text_layers=1, text_heads=4, max_tokens=16, d_shared=16,
                fusion_layers=1, fusion_heads=4)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(base_lr=1e-3, warmup_epochs=1, total_epochs=4, batch_size=4,
                views=2, crop_dims=(8, 8, 4), seed=5, model=tiny_model_config())
    model = overrides.pop("model", None)
    base.update(overrides)
    if model is not None:
        base["model"] = model
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_train_config()
