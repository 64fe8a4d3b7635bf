"""Pytest configuration and fixtures."""

import numpy as np
import pytest


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line(
        "markers", "slow: mark test as a long acceptance run"
    )
    config.addinivalue_line(
        "markers", "integration: mark test as integration test"
    )


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    """Keep runtime settings independent of the developer's environment."""
    for name in ("LATGAS_CACHE", "LATGAS_THREADS", "LATGAS_DEBUG", "LATGAS_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def rng():
    """Provide a seeded generator."""
    return np.random.default_rng(20240611)


@pytest.fixture
def two_point_law():
    """Symmetric +-1 disorder."""
    from latgas.disorder import DisorderLaw

    return DisorderLaw.discrete([-1.0, 1.0], [0.5, 0.5])


@pytest.fixture
def uniform_law():
    """Uniform disorder on [-1, 1]."""
    from latgas.disorder import DisorderLaw

    return DisorderLaw.uniform(1.0)


@pytest.fixture
def constant_law():
    """Disorder identically zero."""
    from latgas.disorder import DisorderLaw

    return DisorderLaw.constant(0.0)


@pytest.fixture
def metropolis():
    """Metropolis rate family."""
    from latgas.dynamics import RateFamily

    return RateFamily.builtin("metropolis")


@pytest.fixture
def ring8():
    """Ring of eight sites."""
    from latgas.lattice import make_torus

    return make_torus([8])


@pytest.fixture
def square4():
    """Four by four torus."""
    from latgas.lattice import make_torus

    return make_torus([4, 4])
