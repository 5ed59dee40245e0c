import pytest
from hypothesis import settings

from tcenter.config import PAPER_T1
from tcenter.register import catalog_for

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def config():
    return PAPER_T1


@pytest.fixture(scope="session")
def catalog(config):
    return catalog_for(config)
