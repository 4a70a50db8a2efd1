import numpy as np
import pytest
import torch

from promptseg.backbone import BackboneConfig, Backbone, FrozenBackbone
from promptseg.prompting import PromptedModel, init_prompt_set


TINY_CONFIG = BackboneConfig(num_scales=2, base_channels=8,
                             num_classes_pretrain=2)
TINY_SIZE = 32


def make_tiny_frozen(seed=0):
    return FrozenBackbone(Backbone(TINY_CONFIG, seed=seed))


def make_tiny_model(seed=0, num_prompts=3, num_classes=4):
    frozen = make_tiny_frozen(seed)
    prior = 0.5 * np.ones((1, TINY_SIZE // 2, TINY_SIZE // 2))
    pset = init_prompt_set(prior, num_prompts, seed=seed)
    return PromptedModel(frozen, pset, num_classes, seed=seed + 1)


@pytest.fixture
def tiny_frozen():
    return make_tiny_frozen()


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def tiny_image():
    rng = np.random.default_rng(7)
    return rng.random((1, TINY_SIZE, TINY_SIZE)).astype(np.float32)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(12345)
