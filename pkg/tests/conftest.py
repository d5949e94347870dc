import numpy as np
import pytest

from lossforge.datasets import synth_task


@pytest.fixture(scope="session")
def blobs_task():
    return synth_task("blobs", n=500, seed=1, classes=2, dim=2, separation=4.0)


@pytest.fixture(scope="session")
def separable_task():
    # Separation 10 makes the Bayes error ~3e-7: effectively deterministic.
    return synth_task("blobs", n=500, seed=2, classes=2, dim=2, separation=10.0)


@pytest.fixture(scope="session")
def regression_task():
    return synth_task("linear-regression", n=400, seed=3, dim=4, noise=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
