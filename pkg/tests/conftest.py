import pytest

from atomforge.core import load_config


@pytest.fixture(scope="session")
def cfg():
    return load_config(env={})
