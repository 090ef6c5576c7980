"""HTTP control plane for the controller host runtime."""

from .app import ServiceState, create_app

__all__ = ["ServiceState", "create_app"]
