from wattline.backend.app import BackendApp, ServerSettings
from wattline.backend.http import BackgroundServer, HttpError, Request, Response

__all__ = ["BackendApp", "BackgroundServer", "HttpError", "Request", "Response", "ServerSettings"]
