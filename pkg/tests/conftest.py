import numpy as np
import pytest

from lidiff.data import make_toy_dataset
from lidiff.model import ModelConfig, SpiLiFormer
from lidiff.train import TrainRecipe, train_loop

# the desk-scale acceptance setup: depth (1,1,1), C=16, T=2 on 16x16 blobs
TOY_MODEL = dict(T=2, in_channels=1, img_size=16, num_classes=2, base_channels=16, stage_depths=(1, 1, 1))
TOY_RECIPE = dict(epochs=30, batch_size=32, seed=0)


def toy_config(**kw):
    return ModelConfig(**{**TOY_MODEL, **kw})


@pytest.fixture(scope="session")
def blobs():
    return make_toy_dataset("blobs", 256, seed=0), make_toy_dataset("blobs", 128, seed=1, split="eval")


@pytest.fixture(scope="session")
def trained_toy(blobs):
    """Full model trained on blobs for 30 epochs: (model, history)."""
    train, ev = blobs
    model = SpiLiFormer(toy_config(), seed=0)
    history = train_loop(model, train, TrainRecipe(**TOY_RECIPE), ev)
    model.eval()
    return model, history


def weights_digest(model):
    return {k: v.tobytes() for k, v in model.state_dict().items()}


@pytest.fixture
def rng():
    return np.random.default_rng(0)
