"""Shared fixtures: small networks, seeded objectives and assembled systems."""
import os

import numpy as np
import pytest

from config import Config
from model import QuadraticObjective, assemble_system, random_objectives
from network import path_network, ring_network

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scenarios")


@pytest.fixture
def config() -> Config:
    return Config.default()


@pytest.fixture
def scenario_dir() -> str:
    return SCENARIO_DIR


@pytest.fixture
def ring5():
    return ring_network(5)


@pytest.fixture
def path2():
    return path_network(2, scaling=0.4)


@pytest.fixture
def objectives5():
    return random_objectives(5, 1, (0.5, 2.0), (0.0, 3.0), seed=5)


@pytest.fixture
def system5(ring5, objectives5):
    """Ring of five, attack on v1, monitor on v3, w=0.5."""
    return assemble_system(ring5, objectives5, 0.1, attack_node=1, monitor_node=3, w=0.5)


@pytest.fixture
def two_agents():
    """Path of two with hand-picked objectives; optimum x* = -(1 + 2) / (1 + 3)."""
    network = path_network(2, scaling=0.4)
    objectives = [QuadraticObjective(Q=[[1.0]], c=[1.0]), QuadraticObjective(Q=[[3.0]], c=[2.0])]
    return network, objectives


def unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)
