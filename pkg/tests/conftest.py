import numpy as np
import pytest

import trainer
from data_io import generate
from factories import small_run, small_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def run_config():
    return small_run()


@pytest.fixture
def dataset():
    return generate(small_spec())


@pytest.fixture
def prepared(run_config, dataset):
    """(run, dataset, bank, codebook) after the preparation stage"""
    bank, codebook = trainer.prepare(dataset, run_config)
    return run_config, dataset, bank, codebook
