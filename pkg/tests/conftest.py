import numpy as np
import pytest

from graph_moe.graph_data import GraphDataset, canonical_adjacency, generate_sbm, make_splits
from graph_moe.rng import RngState
from graph_moe.train_config import TrainConfig


@pytest.fixture
def sample_rng():
    return np.random.default_rng(42)


@pytest.fixture
def path_graph():
    """0 - 1 - 2, two classes."""
    adjacency = canonical_adjacency(3, np.array([0, 1]), np.array([1, 2]))
    features = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return GraphDataset("path3", 3, 2, 2, adjacency, features, np.array([0, 1, 0]))


@pytest.fixture
def small_sbm():
    return generate_sbm(60, 3, 0.25, 0.02, 6, 0.5, RngState(0))


@pytest.fixture
def small_split(small_sbm):
    return make_splits(small_sbm, seed=0)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(hidden=8, blocks=2, max_epochs=5, patience=5, dropout=0.2, lr=0.01)
