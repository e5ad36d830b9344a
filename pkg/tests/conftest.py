import pytest

from straq import Catalog

from synthdata import add_sessions


@pytest.fixture
def catalog(tmp_path):
    return Catalog(tmp_path / "cat")


@pytest.fixture
def sessions(catalog, tmp_path):
    return add_sessions(catalog, tmp_path)
