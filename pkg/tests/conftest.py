import numpy as np
import pytest

from tinystyle.data import ToyDatasetSpec, read_shards, synth_toy_dataset
from tinystyle.models import Discriminator, Generator, ModelConfig

TINY_CFG = ModelConfig(resolution=16, z_dim=16, mapping_depth=2,
                       base_channels=16, min_channels=4)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return TINY_CFG


@pytest.fixture(scope="session")
def tiny_gen(tiny_cfg) -> Generator:
    return Generator(tiny_cfg, seed=11)


@pytest.fixture(scope="session")
def tiny_disc(tiny_cfg) -> Discriminator:
    return Discriminator(tiny_cfg, seed=12)


@pytest.fixture(scope="session")
def toy_shard_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_shards")
    synth_toy_dataset(ToyDatasetSpec(resolution=16, count=256, seed=0), out)
    return out


@pytest.fixture(scope="session")
def toy_reader(toy_shard_dir):
    return read_shards(toy_shard_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
