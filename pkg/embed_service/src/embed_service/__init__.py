"""Reference embedding sidecar for the imagerag engine."""

from .app import create_app, serve
from .config import ServiceConfig
from .slots import SlotSpec

__version__ = "0.1.0"

__all__ = ["ServiceConfig", "SlotSpec", "create_app", "serve", "__version__"]
