"""Reference implementation of the denoiser bridge protocol."""

from .protocol import RequestError, parse_denoise_request, tensor_from_wire, tensor_to_wire
from .server import BridgeServer, DeltaOracle, ServerConfig, serve

__version__ = "0.1.0"
