from __future__ import annotations

import pytest

from stalign.config import DataConfig, RunConfig, TrainConfig
from stalign.data import SyntheticConfig, generate_synthetic_slide
from stalign.encoders import ModelConfig
from stalign.fusion import AbfnConfig


def tiny_config(steps: int = 10, **train) -> RunConfig:
    """A run small enough to train in well under a second per step."""
    syn = SyntheticConfig(grid_side=6, n_domains=2, n_genes=16, patch_size=8)
    model = ModelConfig(embed_dim=16, patch_size=8, niche_size=16, img_channels=(4,),
                        gene_layers=1, gene_heads=2, gene_tokens=4, token_dim=8, frozen_hidden=8)
    return RunConfig(
        data=DataConfig(synthetic=syn, niche_k=3),
        model=model,
        abfn=AbfnConfig(tokens=4, token_dim=4),
        train=TrainConfig(steps=steps, batch_size=8, **train),
    )


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_slide():
    slide, _ = generate_synthetic_slide(tiny_config().data.synthetic)
    return slide
