import numpy as np
import pytest

from flowgrasp import autodiff as ad
from flowgrasp.backbone import Backbone, BackboneConfig
from flowgrasp.expert import ActionExpert, ExpertConfig
from flowgrasp.vocab import Vocabulary

MICRO_BB = dict(dim=16, layers=2, heads=2, max_seq=256, view_px=16, patch=4,
                n_views=3, proprio_dim=4)
MICRO_EX = dict(width=16, layers=2, heads=2, horizon=8, action_dim=3,
                proprio_dim=4, vlm_dim=16, tau_features=8)


def micro_stack(seed=0):
    vocab = Vocabulary()
    bb = Backbone(BackboneConfig(**MICRO_BB), vocab,
                  rng=np.random.default_rng(seed))
    ex = ActionExpert(ExpertConfig(**MICRO_EX),
                      rng=np.random.default_rng(seed + 1))
    return bb, ex, vocab


def random_views(rng, cfg):
    return [rng.random((cfg.view_px, cfg.view_px, 3)).astype(np.float32)
            for _ in range(cfg.n_views)]


@pytest.fixture
def train_mode():
    ad.set_mode("train")
    yield
    ad.set_mode("train")


@pytest.fixture
def test_mode():
    ad.set_mode("test")
    yield
    ad.set_mode("train")
