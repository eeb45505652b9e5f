import numpy as np
import pytest

from speckv import DecoderConfig, init_decoder


@pytest.fixture(scope="session")
def config():
    return DecoderConfig()


@pytest.fixture(scope="session")
def weights(config):
    return init_decoder(config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
