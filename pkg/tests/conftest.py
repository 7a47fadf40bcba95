import numpy as np
import pytest

from few_tensorf.config import RunConfig
from few_tensorf.tensorf_pipeline.factor_grid import GridGeometry
from few_tensorf.tensorf_pipeline.field import build_field
from helpers import tiny_config


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture
def field(config):
    return build_field(config.model, config.seed)


@pytest.fixture
def geometry() -> GridGeometry:
    return GridGeometry((5, 6, 7), (-1.0, -1.5, -0.5), (1.0, 1.0, 2.0))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
