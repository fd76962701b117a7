import numpy as np
import pytest

from seqdiff.schedules import DiscreteNoiseGrid, NoiseSchedule


@pytest.fixture(scope="session")
def cosine():
    return NoiseSchedule("cosine")


@pytest.fixture(scope="session")
def shifted():
    return NoiseSchedule("shifted-cosine", shift=0.125)


@pytest.fixture(scope="session")
def grid16(cosine):
    return DiscreteNoiseGrid(cosine, 16)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
