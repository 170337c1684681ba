import numpy as np
import pytest
import torch

from amtnet.data import SyntheticSpec, synthetic_split


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_classes=8, samples_per_class=12, image_size=16, n_novel=3, seed=5)


@pytest.fixture(scope="session")
def tiny_base(tiny_spec):
    return synthetic_split(tiny_spec, "base")


@pytest.fixture(scope="session")
def tiny_novel(tiny_spec):
    return synthetic_split(tiny_spec, "novel")


def f64(*values):
    return torch.tensor(values, dtype=torch.float64)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains many models (acceptance trend criteria)")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
