import numpy as np
import pytest

from dipa import backbone as B
from dipa.tensor import Rng

TINY = B.PRESETS["tiny"]


@pytest.fixture
def tiny():
    return TINY


@pytest.fixture
def tiny_weights():
    return B.init_random_weights(TINY, Rng(3), "lecun", "f64")


@pytest.fixture
def rng():
    return Rng(1234)


def tiny_images(rng, n, config=TINY):
    return rng.normal((n, config.in_chans, config.image_size, config.image_size))


def random_unit(rng, shape):
    x = rng.normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
