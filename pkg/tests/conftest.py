from dataclasses import replace

import pytest

from segrefine.data import make_corpus
from segrefine.losses import LossWeights
from segrefine.model import ModelConfig
from segrefine.pipeline import TrainConfig

# small enough that a full two-phase run takes about a second
TINY_MODEL = ModelConfig(input_size=32, widths=(4, 8), blocks_per_stage=1)
TINY_TRAIN = TrainConfig(
    phase1_epochs=2,
    phase2_epochs=4,
    batch_size=4,
    strong_batch_size=2,
    replacement_start_epoch=2,
    replacement_period=2,
    snapshot_epochs=(),
    checkpoint_every=1,
)
TINY_LOSSES = LossWeights(0.3, 0.1, rampup_epochs=2)


def tiny_corpus(seed: int = 5):
    return make_corpus(24, 4, 4, 32, seed=seed)


def tiny_train(**kw) -> TrainConfig:
    return replace(TINY_TRAIN, **kw)


@pytest.fixture
def corpus():
    return tiny_corpus()
