import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from qmaxseg import BackboneConfig, ModelConfig


def tiny_backbone(input_size=64, base=32, depths=(1, 1, 1, 1)):
    return BackboneConfig(input_size=input_size, base_channels=base, depths=depths)


def tiny_model_config(input_size=64, base=32, num_classes=4, **kw):
    return ModelConfig(
        num_classes=num_classes,
        backbone=tiny_backbone(input_size=input_size, base=base),
        d_fpn=64,
        refine_layers=1,
        refine_heads=4,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
