import io

import pytest
from PIL import Image

from tikzsmith_adapter.backend import ModelBackend
from tikzsmith_adapter.config import AdapterConfig
from tikzsmith_adapter.server import create_app


@pytest.fixture(scope="session")
def backend():
    # randomly initialized tiny models: full code path, no downloads
    return ModelBackend(AdapterConfig())


@pytest.fixture
def app(backend):
    return create_app(AdapterConfig(), backend=backend)


@pytest.fixture
def client(app):
    from fastapi.testclient import TestClient

    return TestClient(app)


@pytest.fixture
def png_bytes():
    buf = io.BytesIO()
    img = Image.new("L", (40, 40), 255)
    img.paste(0, (0, 0, 20, 40))
    img.save(buf, format="PNG")
    return buf.getvalue()
