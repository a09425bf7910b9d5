import numpy as np
import pytest

from mdsgnn.graphdata import make_sbm_graph, save_dataset
from tests.factories import GraphFactory, IncompleteGraphFactory, TrainConfigFactory


@pytest.fixture
def graph():
    return GraphFactory(seed=0)


@pytest.fixture
def incomplete_graph():
    return IncompleteGraphFactory(clean__seed=0)


@pytest.fixture
def small_config():
    return TrainConfigFactory(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sbm_dir(tmp_path):
    directory = tmp_path / "sbm"
    save_dataset(
        make_sbm_graph(n=60, f=12, p_in=0.3, p_out=0.02, train_per_class=4, val_per_class=4),
        directory,
    )
    return directory
