import numpy as np
import pytest
import torch

from looptrack.data import SynthConfig, synth_sequence
from looptrack.geometry import AnchorConfig, make_anchor_grid
from looptrack.model import ModelConfig, ResponseMap, SiameseNet

TINY_ANCHORS = AnchorConfig(ratios=(0.5, 2.0))


class CenteredNet(SiameseNet):
    """
    Real network with a large bonus on the object logit of anchor 0 at the
    lattice center, so every step predicts around its prior. Gradients still
    reach every parameter.
    """

    BONUS = 100.0

    def forward(self, template, search):
        response = super().forward(template, search)
        bonus = torch.zeros_like(response.scores)
        center = response.size // 2
        bonus[:, 0, center, center] = self.BONUS
        return ResponseMap(response.scores + bonus, response.deltas, response.masks, response.k)


def centered_net(config: ModelConfig) -> CenteredNet:
    net = CenteredNet(config)
    with torch.no_grad():
        net.box_head[-1].weight.zero_()
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return ModelConfig(width=8, anchors=TINY_ANCHORS)


@pytest.fixture
def tiny_mask_config():
    return ModelConfig(width=8, anchors=TINY_ANCHORS, mask_enabled=True, mask_size=15)


@pytest.fixture
def tiny_net(tiny_config):
    return SiameseNet(tiny_config)


@pytest.fixture
def tiny_mask_net(tiny_mask_config):
    return SiameseNet(tiny_mask_config)


@pytest.fixture
def steady_net(tiny_config):
    """Untrained network whose predictions stay centered on their prior (zero box deltas)."""
    return centered_net(tiny_config)


@pytest.fixture
def make_steady_net():
    return centered_net


@pytest.fixture
def tiny_grid():
    return make_anchor_grid(TINY_ANCHORS)


@pytest.fixture
def synth_config():
    return SynthConfig(
        frame_width=96,
        frame_height=96,
        length=6,
        shapes=("rectangle",),
        size_min=20,
        size_max=28,
        velocity=(2.0, 0.0),
        texture_seed=3,
    )


@pytest.fixture
def moving_sequence(synth_config):
    return synth_sequence(synth_config, np.random.default_rng(1), "moving")
