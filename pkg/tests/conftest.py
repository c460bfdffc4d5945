import pytest

from grid_lode import diffcore as dc
from grid_lode import griddata

from .helpers import tiny_model


@pytest.fixture(autouse=True)
def clean_tape_stack():
    '''Tests must never leak an active tape into the next one'''
    yield
    assert dc.active_tape() is None


@pytest.fixture(scope='session')
def feeder():
    return griddata.default_feeder()


@pytest.fixture(scope='session')
def truth(feeder):
    return griddata.generate_profiles(feeder, seed=0)


@pytest.fixture(scope='session')
def records(truth):
    return griddata.sample_multirate(truth, seed=0)


@pytest.fixture(scope='session')
def dataset(records):
    return griddata.unify_time_grid(records)


@pytest.fixture
def model():
    '''A small randomly initialized model (latent 3, hidden 4, dynamics 2 x 5)'''
    return tiny_model()
