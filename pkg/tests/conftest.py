import numpy as np

import pytest

from relso.models import ReLSOModel, make_config
from relso.seqdata import Alphabet, ToyLandscapeSpec, gen_toy_landscape
from relso.trainer import TrainConfig, train
from tests import factories

MEMORIZED = ("ACDEAC", "CADEDA", "DEACCE", "EDCAAD", "AAAACC", "CCCCEE", "DDDDAA", "EEEEDC")
DESK_STEPS = 1500


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def alphabet():
    return Alphabet("ACDE")


@pytest.fixture
def dataset():
    return factories.FitnessDatasetFactory()


@pytest.fixture
def model_config():
    return factories.ModelConfigFactory()


@pytest.fixture
def model(model_config, alphabet):
    return ReLSOModel(model_config, alphabet=alphabet, seed=0)


@pytest.fixture(scope="session")
def toy():
    return gen_toy_landscape(factories.ToyLandscapeSpecFactory(seed=3))


@pytest.fixture(scope="session")
def trained(toy):
    dataset, _ = toy
    return train(dataset, factories.ModelConfigFactory(), factories.TrainConfigFactory(steps=30))


@pytest.fixture(scope="session")
def memorized():
    """Desk autoencoder trained on eight length-6 sequences (repeated as the val split)"""
    dataset = factories.FitnessDatasetFactory(
        sequences=MEMORIZED * 2,
        fitness=np.linspace(0.0, 1.0, 8).tolist() * 2,
        splits=("train",) * 8 + ("val",) * 8,
        max_len=6,
    )
    result = train(dataset, make_config("ae"), TrainConfig(steps=2000, batch_size=8, lr=1e-3, eval_every=500))
    return dataset, result


@pytest.fixture(scope="session")
def desk_toy():
    return gen_toy_landscape(ToyLandscapeSpec(seed=0, n_samples=2048))


@pytest.fixture(scope="session")
def desk_models(desk_toy):
    """Desk-scale models of every preset on ``desk_toy``, trained once per (preset, seed)"""
    dataset, _ = desk_toy
    cache = {}

    def _trained(preset, seed=0):
        if (preset, seed) not in cache:
            config = TrainConfig(steps=DESK_STEPS, batch_size=64, lr=1e-3, seed=seed, eval_every=500)
            cache[preset, seed] = train(dataset, make_config(preset), config)
        return cache[preset, seed]

    return _trained


@pytest.fixture
def write_file(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return str(path)

    return _write
