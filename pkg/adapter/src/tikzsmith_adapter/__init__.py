"""Reference model server for the tikzsmith wire protocol."""

from .backend import ModelBackend
from .config import AdapterConfig, load_config
from .server import create_app
from .store import ImageStore

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "ImageStore", "ModelBackend", "create_app", "load_config", "__version__"]
