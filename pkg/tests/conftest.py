"""Pytest configuration and shared fixtures."""

import os
import sys
from pathlib import Path

# Add the project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# Set test environment variables
os.environ["UQ_THREADS"] = "1"
os.environ["UQ_LOG_LEVEL"] = "WARNING"
os.environ["UQ_LOG_JSON"] = "true"

# Import after setting environment
import numpy as np
import pytest

from mcsd.models import NetworkSpec
from mcsd.services.data import gen_blobs, gen_moons
from mcsd.services.resnet import ResidualNet


def pytest_configure(config):
    """Configure pytest."""
    config.addinivalue_line(
        "markers", "integration: mark test as integration test"
    )
    config.addinivalue_line(
        "markers", "unit: mark test as unit test"
    )
    config.addinivalue_line(
        "markers", "slow: mark test as slow running"
    )


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    """Three residual blocks of width 4 on 3 inputs and 3 classes."""
    return NetworkSpec(input_dim=3, hidden_dim=4, num_blocks=3, num_classes=3)


@pytest.fixture
def small_net(small_spec):
    return ResidualNet.initialize(small_spec, seed=7)


@pytest.fixture
def scalar_net():
    """
    One-block scalar network: identity stem, ``F(x) = 1``, head ``[x, 0]``.

    ``fc1`` is zeroed and ``fc2`` has bias 1 so the residual branch is the
    constant 1 for any input; logit 0 equals the pre-head activation.
    """
    spec = NetworkSpec(input_dim=1, hidden_dim=1, num_blocks=1, num_classes=2, use_batchnorm=False)
    net = ResidualNet.initialize(spec, seed=0)
    net.params["stem.weight"][:] = 1.0
    net.params["stem.bias"][:] = 0.0
    net.params["blocks.0.fc1.weight"][:] = 0.0
    net.params["blocks.0.fc1.bias"][:] = 0.0
    net.params["blocks.0.fc2.weight"][:] = 0.0
    net.params["blocks.0.fc2.bias"][:] = 1.0
    net.params["head.weight"][:] = np.array([[1.0, 0.0]])
    net.params["head.bias"][:] = 0.0
    return net


@pytest.fixture
def moons():
    return gen_moons(200, noise_sigma=0.2, seed=3)


@pytest.fixture
def separable_blobs():
    """Two Gaussian blobs twenty standard deviations apart."""
    return gen_blobs(120, centers=[[-2.0, 0.0], [2.0, 0.0]], sigma=0.2, seed=5)
