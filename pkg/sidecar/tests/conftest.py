import pytest
from fastapi.testclient import TestClient

from retrocap_sidecar.app import create_app
from retrocap_sidecar.config import ServiceConfig


@pytest.fixture(scope="session")
def config():
    return ServiceConfig(seed=3)


@pytest.fixture(scope="session")
def client(config):
    with TestClient(create_app(config)) as c:
        yield c
