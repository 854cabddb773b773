import numpy as np
import pytest
import torch

from evseg.backbones import ModelConfig
from evseg.branches import BranchState
from evseg.foundation import build_components


MICRO = dict(d_v=8, d_t=4, d_f=8, k_tokens=2, queries=3, decoder_layers=2, d_q=8,
             enc_channels=(4, 4), unet_channels=(4, 6, 8), projector_hidden=8,
             pixel_channels=4, mask_channels=4, dn_channels=4)


def micro_config(**over) -> ModelConfig:
    return ModelConfig(**{**MICRO, **over})


def micro_components(seed: int = 0, **over):
    return build_components(micro_config(**over), seed)


def branch_from(components) -> BranchState:
    return BranchState(components["encoder"], components["projector"],
                       components["features"], components["masks"])


def rand_image(h=8, w=8, batch=1, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 1, h, w, dtype=dtype, generator=gen)


@pytest.fixture
def micro():
    comps = micro_components(seed=7)
    return comps
