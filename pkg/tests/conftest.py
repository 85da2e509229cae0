"""Shared fixtures: a small deterministic corpus and a tiny model.

Everything runs in float64 on CPU; dimensions are kept small so numeric
oracles and finite-difference checks stay fast.
"""

import numpy as np
import pytest

from locret.corpus import DEFAULT_DISEASES, corpus_meta, default_layout, gen_corpus
from locret.model import ModelConfig, VisionLanguageModel


@pytest.fixture(scope="session")
def layout():
    return default_layout(64)


@pytest.fixture(scope="session")
def meta(layout):
    return corpus_meta(layout, DEFAULT_DISEASES)


@pytest.fixture(scope="session")
def small_corpus(layout):
    return gen_corpus(layout, DEFAULT_DISEASES, 24, normal_fraction=0.25, seed=7)


def tiny_model_config(meta, **overrides) -> ModelConfig:
    """8-dim everything, 2 heads, 2 blocks: big enough to exercise all paths."""
    kwargs = dict(
        vocab_size=len(meta.vocab),
        image_size=meta.layout.image_size[0],
        max_report_len=meta.max_report_len,
        patch_size=16, patch_channels=8, patch_hidden=8,
        token_dim=8, joint_dim=8, num_heads=2, num_blocks=2,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture()
def tiny_model(meta):
    return VisionLanguageModel(tiny_model_config(meta)).init_weights(11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
